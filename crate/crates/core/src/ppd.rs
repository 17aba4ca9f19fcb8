//! Posterior predictive distributions of seen and unseen classes.
//!
//! A class `c` with supporting seen classes `i = 1..K` (its meta-class) gets a
//! Student-t predictive density obtained by integrating out the class mean,
//! the meta-class mean and the shared meta-class covariance of the
//! hierarchy
//!
//! ```text
//! x ~ N(μ_c, Σ),  μ_c ~ N(μ_j, Σ/κ1),  μ_j ~ N(μ0, Σ/κ0),  Σ ~ IW(Σ0, m)
//! ```
//!
//! Support classes enter through their means, scatter matrices and sizes.
//! Unseen classes use the same construction with the current-class data
//! removed. The diagonal ("constrained") variant applies the univariate
//! version of every formula axis by axis, with the Inverse-Gamma prior
//! `IG(a0, b0)` expressed as the one-dimensional Inverse-Wishart
//! `IW(2·b0, 2·a0)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{ClassStats, Scatter, StudentT};

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Dispersion of meta-class means around the global mean.
    pub kappa0: f64,
    /// Dispersion of class means around their meta-class mean.
    pub kappa1: f64,
    /// Inverse-Wishart degrees of freedom.
    pub m: f64,
    /// Multiplier applied to the averaged class covariance to form `Σ0`.
    pub s: f64,
    /// Number of supporting seen classes per meta-class.
    #[serde(rename = "K")]
    pub k: usize,
    /// Inverse-Gamma shape for the diagonal model; `m / 2` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    /// Inverse-Gamma scale for the diagonal model; derived from `s` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            kappa0: 0.1,
            kappa1: 10.0,
            m: 12.0,
            s: 1.0,
            k: 2,
            a0: None,
            b0: None,
        }
    }
}

/// Covariance structure of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovForm {
    Full,
    Diagonal,
}

impl Hyperparams {
    /// Degrees of freedom of the per-axis prior in the diagonal model.
    pub fn axis_dof(&self) -> f64 {
        self.a0.map_or(self.m, |a| 2.0 * a)
    }

    pub fn validate(&self, dim: usize, form: CovForm) -> Result<()> {
        let positive = [("kappa0", self.kappa0), ("kappa1", self.kappa1), ("s", self.s)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Hyperparams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Hyperparams("K must be at least 1".into()));
        }
        match form {
            CovForm::Full => {
                let min = dim as f64 + 2.0;
                if !(self.m >= min) {
                    return Err(Error::Hyperparams(format!(
                        "m must be at least D + 2 = {min}, got {}",
                        self.m
                    )));
                }
            }
            CovForm::Diagonal => {
                for (name, v) in [("a0", self.a0), ("b0", self.b0)] {
                    if let Some(v) = v {
                        if !(v > 0.0) || !v.is_finite() {
                            return Err(Error::Hyperparams(format!("{name} must be positive, got {v}")));
                        }
                    }
                }
                if !(self.axis_dof() > 0.0) {
                    return Err(Error::Hyperparams(format!("m must be positive, got {}", self.m)));
                }
            }
        }
        Ok(())
    }
}

/// Population a `Σ0` is averaged from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma0Source {
    /// Mean of per-class covariances `S / (n - 1)`.
    #[default]
    Covariance,
    /// Mean of raw per-class scatter matrices.
    Scatter,
}

/// Global prior shared by every class.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPrior {
    pub mu0: DVector<f64>,
    /// Full PD matrix or positive per-axis values.
    pub sigma0: Scatter,
}

impl GlobalPrior {
    pub fn form(&self) -> CovForm {
        if self.sigma0.is_diagonal() {
            CovForm::Diagonal
        } else {
            CovForm::Full
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

/// `μ0` = unweighted mean of the class means, `Σ0` = `s` × mean class
/// covariance (or scatter). Classes with one sample are left out of the
/// covariance average. The form of `Σ0` follows the form of the statistics.
pub fn global_prior(seen: &[&ClassStats], s: f64, source: Sigma0Source) -> Result<GlobalPrior> {
    let first = seen
        .first()
        .ok_or_else(|| Error::invalid("global prior needs at least one seen class"))?;
    let dim = first.dim();
    let mut mu0 = DVector::zeros(dim);
    for st in seen {
        if st.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: st.dim(),
            });
        }
        mu0 += &st.mean;
    }
    mu0 /= seen.len() as f64;

    let mut acc = first.scatter.zeros_like();
    let mut used = 0usize;
    for st in seen {
        let term = match source {
            Sigma0Source::Covariance => match st.covariance() {
                Some(c) => c,
                None => continue,
            },
            Sigma0Source::Scatter if st.count > 1 => st.scatter.clone(),
            Sigma0Source::Scatter => continue,
        };
        acc.add_assign(&term);
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid(
            "every seen class has a single sample; no covariance information for the prior",
        ));
    }
    Ok(GlobalPrior {
        mu0,
        sigma0: acc.scaled(s / used as f64),
    })
}

/// Diagonal prior for the constrained model: `Σ0_d = 2·b0` when `b0` is
/// given, otherwise `s` × the mean per-axis class variance.
pub fn global_prior_diag(seen: &[&ClassStats], hp: &Hyperparams, source: Sigma0Source) -> Result<GlobalPrior> {
    let diag_stats: Vec<ClassStats> = seen
        .iter()
        .map(|st| ClassStats {
            mean: st.mean.clone(),
            scatter: Scatter::Diagonal(st.scatter.diagonal()),
            count: st.count,
        })
        .collect();
    let refs: Vec<&ClassStats> = diag_stats.iter().collect();
    let mut prior = global_prior(&refs, hp.s, source)?;
    if let Some(b0) = hp.b0 {
        prior.sigma0 = Scatter::Diagonal(DVector::from_element(prior.dim(), 2.0 * b0));
    }
    Ok(prior)
}

/// Meta-class quantities shared by the predictive densities.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPosterior {
    /// Posterior mean of the meta-class mean.
    pub mu_bar: DVector<f64>,
    /// Posterior precision scale of the meta-class mean.
    pub kappa_bar: f64,
    /// Effective precision scale of the class-mean prior.
    pub kappa_tilde: f64,
    /// Sum of the support classes' scatter matrices.
    pub scatter_sum: Scatter,
    /// Sum of support class sizes.
    pub count_sum: usize,
    /// `Σ (n_i - 1)` over support classes.
    pub dof_sum: f64,
    /// Rank-one correction from the current class mean; zero without one.
    pub s_mu: Scatter,
    /// Weights of the support means followed by the weight of `μ0`; they sum
    /// to one.
    pub weights: Vec<f64>,
}

/// Sums support scatters in the form used by `prior`.
pub fn support_scatter_sum(support: &[&ClassStats], prior: &GlobalPrior) -> Scatter {
    let mut acc = prior.sigma0.zeros_like();
    for st in support {
        acc.add_assign(&st.scatter);
    }
    acc
}

pub fn meta_posterior(
    support: &[&ClassStats],
    prior: &GlobalPrior,
    hp: &Hyperparams,
    current: Option<&ClassStats>,
) -> Result<MetaPosterior> {
    let scatter_sum = support_scatter_sum(support, prior);
    meta_posterior_with_scatter(support, scatter_sum, prior, hp, current)
}

/// `meta_posterior` with a precomputed support scatter sum.
pub fn meta_posterior_with_scatter(
    support: &[&ClassStats],
    scatter_sum: Scatter,
    prior: &GlobalPrior,
    hp: &Hyperparams,
    current: Option<&ClassStats>,
) -> Result<MetaPosterior> {
    if support.is_empty() {
        return Err(Error::invalid("meta-class has no supporting classes"));
    }
    let dim = prior.dim();
    let k1 = hp.kappa1;
    let raw: Vec<f64> = support
        .iter()
        .map(|st| {
            let n = st.count as f64;
            n * k1 / (n + k1)
        })
        .collect();
    let kappa_bar = raw.iter().sum::<f64>() + hp.kappa0;
    let mut mu_bar = &prior.mu0 * hp.kappa0;
    for (st, w) in support.iter().zip(&raw) {
        if st.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: st.dim(),
            });
        }
        mu_bar.axpy(*w, &st.mean, 1.0);
    }
    mu_bar /= kappa_bar;
    let kappa_tilde = kappa_bar * k1 / (kappa_bar + k1);

    let mut weights: Vec<f64> = raw.iter().map(|w| w / kappa_bar).collect();
    weights.push(hp.kappa0 / kappa_bar);

    let s_mu = match current {
        Some(cur) => {
            let n = cur.count as f64;
            let coef = n * kappa_tilde / (kappa_tilde + n);
            let d = &cur.mean - &mu_bar;
            match prior.sigma0 {
                Scatter::Full(_) => Scatter::Full((&d * d.transpose()) * coef),
                Scatter::Diagonal(_) => Scatter::Diagonal(d.map(|v| v * v) * coef),
            }
        }
        None => prior.sigma0.zeros_like(),
    };

    Ok(MetaPosterior {
        mu_bar,
        kappa_bar,
        kappa_tilde,
        scatter_sum,
        count_sum: support.iter().map(|s| s.count).sum(),
        dof_sum: support.iter().map(|s| s.count as f64 - 1.0).sum(),
        s_mu,
        weights,
    })
}

/// Predictive density of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPpd {
    pub class_id: usize,
    pub student_t: StudentT,
    pub seen: bool,
}

fn check_dims(current: Option<&ClassStats>, mp: &MetaPosterior, prior: &GlobalPrior) -> Result<()> {
    let d = prior.dim();
    for actual in [mp.mu_bar.len(), mp.scatter_sum.dim(), prior.sigma0.dim()]
        .into_iter()
        .chain(current.map(|c| c.dim()))
    {
        if actual != d {
            return Err(Error::DimensionMismatch { expected: d, actual });
        }
    }
    Ok(())
}

/// Sum of the scale components `Σ0 + Σ S_i (+ S_c + S_μ)` in `form`.
fn scale_numerator(current: Option<&ClassStats>, mp: &MetaPosterior, prior: &GlobalPrior, form: CovForm) -> Scatter {
    let mut acc = match form {
        CovForm::Full => prior.sigma0.clone(),
        CovForm::Diagonal => Scatter::Diagonal(prior.sigma0.diagonal()),
    };
    acc.add_assign(&mp.scatter_sum);
    if let Some(cur) = current {
        acc.add_assign(&cur.scatter);
        acc.add_assign(&mp.s_mu);
    }
    acc
}

fn build_t(location: DVector<f64>, numerator: Scatter, factor: f64, dof: f64) -> Result<StudentT> {
    if !(dof > 0.0) {
        return Err(Error::NonPositiveDof(dof));
    }
    match numerator {
        Scatter::Full(m) => StudentT::full(location, m * factor, dof),
        Scatter::Diagonal(v) => StudentT::diagonal(location, v * factor, dof),
    }
}

/// Seen-class formula evaluated for any class size, including a phantom
/// class with `count = 0` (which reproduces the unseen-class density).
pub fn seen_form(
    class_id: usize,
    current: &ClassStats,
    mp: &MetaPosterior,
    prior: &GlobalPrior,
    hp: &Hyperparams,
    form: CovForm,
) -> Result<ClassPpd> {
    check_dims(Some(current), mp, prior)?;
    let n = current.count as f64;
    let kt = mp.kappa_tilde;
    let shrink = n / (n + kt);
    let location = &mp.mu_bar + (&current.mean - &mp.mu_bar) * shrink;
    let dof = match form {
        CovForm::Full => n + mp.dof_sum + hp.m - prior.dim() as f64 + 1.0,
        CovForm::Diagonal => n + mp.dof_sum + hp.axis_dof() - 1.0 + 1.0,
    };
    let factor = (n + kt + 1.0) / ((n + kt) * dof);
    let numerator = scale_numerator(Some(current), mp, prior, form);
    let student_t = build_t(location, numerator, factor, dof)?;
    Ok(ClassPpd {
        class_id,
        student_t,
        seen: true,
    })
}

fn require_samples(current: &ClassStats) -> Result<()> {
    if current.count == 0 {
        return Err(Error::invalid("seen class has no training samples"));
    }
    Ok(())
}

fn unseen_form(
    class_id: usize,
    mp: &MetaPosterior,
    prior: &GlobalPrior,
    hp: &Hyperparams,
    form: CovForm,
) -> Result<ClassPpd> {
    check_dims(None, mp, prior)?;
    let kt = mp.kappa_tilde;
    let dof = match form {
        CovForm::Full => mp.dof_sum + hp.m - prior.dim() as f64 + 1.0,
        CovForm::Diagonal => mp.dof_sum + hp.axis_dof() - 1.0 + 1.0,
    };
    let factor = (kt + 1.0) / (kt * dof);
    let numerator = scale_numerator(None, mp, prior, form);
    let student_t = build_t(mp.mu_bar.clone(), numerator, factor, dof)?;
    Ok(ClassPpd {
        class_id,
        student_t,
        seen: false,
    })
}

/// Predictive density of a seen class combining its own data with the
/// meta-class prior.
pub fn seen_ppd(
    class_id: usize,
    current: &ClassStats,
    mp: &MetaPosterior,
    prior: &GlobalPrior,
    hp: &Hyperparams,
) -> Result<ClassPpd> {
    require_samples(current)?;
    seen_form(class_id, current, mp, prior, hp, CovForm::Full)
}

/// Predictive density of an unseen class from its meta-class alone.
pub fn unseen_ppd(class_id: usize, mp: &MetaPosterior, prior: &GlobalPrior, hp: &Hyperparams) -> Result<ClassPpd> {
    unseen_form(class_id, mp, prior, hp, CovForm::Full)
}

pub fn seen_ppd_diag(
    class_id: usize,
    current: &ClassStats,
    mp: &MetaPosterior,
    prior: &GlobalPrior,
    hp: &Hyperparams,
) -> Result<ClassPpd> {
    require_samples(current)?;
    seen_form(class_id, current, mp, prior, hp, CovForm::Diagonal)
}

pub fn unseen_ppd_diag(class_id: usize, mp: &MetaPosterior, prior: &GlobalPrior, hp: &Hyperparams) -> Result<ClassPpd> {
    unseen_form(class_id, mp, prior, hp, CovForm::Diagonal)
}

/// Identity-scaled full prior, mostly useful for tests and demos.
pub fn isotropic_prior(mu0: DVector<f64>, variance: f64) -> GlobalPrior {
    let d = mu0.len();
    GlobalPrior {
        mu0,
        sigma0: Scatter::Full(DMatrix::identity(d, d) * variance),
    }
}
