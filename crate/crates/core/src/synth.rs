//! Synthetic data from the hierarchical generative model and Monte-Carlo
//! reference computations used to check the closed-form densities.
//!
//! ```text
//! Σ_j  ~ IW(Σ0, m)
//! μ_j  ~ N(μ0, Σ_j / κ0)
//! μ_ji ~ N(μ_j, Σ_j / κ1)
//! x    ~ N(μ_ji, Σ_j)
//! ```
//!
//! Every random quantity is drawn from its own ChaCha stream keyed by
//! `(seed, purpose, meta-class, class)`, so output does not depend on the
//! order in which parts are generated.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::argmax_first;
use crate::dataset::{Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{harmonic_mean, per_class_top1};
use crate::ppd::{GlobalPrior, Hyperparams};
use crate::stats::{cholesky_lower, log_sum_exp, ClassStats, Gaussian, Scatter};

const TAG_COV: u64 = 1;
const TAG_META_MEAN: u64 = 2;
const TAG_CLASS_MEAN: u64 = 3;
const TAG_SAMPLES: u64 = 4;
const TAG_ATTR: u64 = 5;
const TAG_MC: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(purpose, a, b)` key under `seed`.
pub fn keyed_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(splitmix(splitmix(tag) ^ a) ^ b));
    rng
}

fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// Lower-triangular Bartlett factor `A` with `A Aᵀ ~ Wishart(I, dof)`.
fn bartlett_factor<R: Rng + ?Sized>(rng: &mut R, d: usize, dof: f64) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::Numerical(format!("Wishart degrees of freedom {dof}: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    Ok(a)
}

/// Draws `Σ ~ IW(scale, dof)` (mean `scale / (dof - D - 1)`) via the
/// Bartlett decomposition of the Wishart draw `Σ⁻¹ ~ W(scale⁻¹, dof)`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(rng: &mut R, scale: &DMatrix<f64>, dof: f64) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(dof > d as f64 - 1.0) {
        return Err(Error::Numerical(format!(
            "inverse-Wishart needs dof > D - 1, got {dof}"
        )));
    }
    let inv = cholesky_inverse(scale)?;
    let l = cholesky_lower(inv)?;
    let b = &l * bartlett_factor(rng, d, dof)?;
    let b_inv = b
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::NotPositiveDefinite)?;
    let mut sigma = b_inv.transpose() * b_inv;
    symmetrize(&mut sigma);
    Ok(sigma)
}

fn cholesky_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky_lower(m.clone())?;
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(m.nrows(), m.nrows()))
        .ok_or(Error::NotPositiveDefinite)?;
    let mut inv = l_inv.transpose() * l_inv;
    symmetrize(&mut inv);
    Ok(inv)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Draws from `N(mean, cov)`.
pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = cholesky_lower(cov.clone())?;
    Ok(mean + l * std_normal_vec(rng, mean.len()))
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_meta: usize,
    pub classes_per_meta: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub kappa0: f64,
    pub kappa1: f64,
    pub m: f64,
    pub sigma0: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub seed: u64,
    /// Standard deviation of the noise added to meta-class means to form
    /// class attribute vectors.
    pub attr_noise: f64,
    /// Fraction of each seen class's rows reserved for testing.
    pub test_fraction: f64,
    /// Seen classes per meta-class flagged as validation classes.
    pub val_per_meta: usize,
}

impl GenSpec {
    /// Five meta-classes of four classes (one unseen each), 100 samples per
    /// class in ten dimensions, `κ0 = 0.05`, `κ1 = 20`, `m = D + 2`,
    /// `Σ0 = I`, `μ0 = 0`. One seen class per meta-class is flagged for
    /// validation.
    pub fn standard(seed: u64) -> Self {
        let dim = 10;
        Self {
            n_meta: 5,
            classes_per_meta: 4,
            samples_per_class: 100,
            dim,
            kappa0: 0.05,
            kappa1: 20.0,
            m: dim as f64 + 2.0,
            sigma0: DMatrix::identity(dim, dim),
            mu0: DVector::zeros(dim),
            seed,
            attr_noise: 0.05,
            test_fraction: 0.2,
            val_per_meta: 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_meta * self.classes_per_meta
    }

    /// Class id of class `i` of meta-class `j`.
    pub fn class_id(&self, meta: usize, i: usize) -> usize {
        meta * self.classes_per_meta + i
    }

    fn check(&self) -> Result<()> {
        if self.n_meta == 0 || self.classes_per_meta < 2 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(Error::invalid(
                "need at least one meta-class, two classes per meta-class, one sample and one dimension",
            ));
        }
        if self.val_per_meta + 2 > self.classes_per_meta {
            return Err(Error::invalid("too many validation classes per meta-class"));
        }
        if self.sigma0.shape() != (self.dim, self.dim) || self.mu0.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: self.sigma0.nrows(),
            });
        }
        if !(self.m >= self.dim as f64 + 2.0) {
            return Err(Error::Hyperparams(format!("m must be at least D + 2, got {}", self.m)));
        }
        if !(self.kappa0 > 0.0 && self.kappa1 > 0.0) {
            return Err(Error::Hyperparams("kappa0 and kappa1 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Latent parameters behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_means: Vec<DVector<f64>>,
    pub meta_means: Vec<DVector<f64>>,
    pub meta_covs: Vec<DMatrix<f64>>,
    pub meta_of_class: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: GenSpec,
    pub dataset: Dataset,
    pub splits: SplitSpec,
    pub truth: GroundTruth,
}

/// Samples a dataset from the hierarchy. The last class of every meta-class
/// is unseen; with `val_per_meta = v` the `v` classes before it are marked as
/// validation classes.
pub fn sample_dataset(spec: &GenSpec) -> Result<SyntheticData> {
    spec.check()?;
    cholesky_lower(spec.sigma0.clone()).map_err(|_| Error::invalid("Σ0 is not positive definite"))?;
    let d = spec.dim;
    let cpm = spec.classes_per_meta;

    let mut truth = GroundTruth {
        class_means: Vec::with_capacity(spec.n_classes()),
        meta_means: Vec::with_capacity(spec.n_meta),
        meta_covs: Vec::with_capacity(spec.n_meta),
        meta_of_class: Vec::with_capacity(spec.n_classes()),
    };
    let mut features: Vec<f32> = Vec::with_capacity(spec.n_classes() * spec.samples_per_class * d);
    let mut labels = Vec::with_capacity(spec.n_classes() * spec.samples_per_class);
    let mut attributes: Vec<f32> = Vec::with_capacity(spec.n_classes() * d);
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    let mut val = Vec::new();
    let mut test_index = Vec::new();
    let n_test_seen = (spec.samples_per_class as f64 * spec.test_fraction).round() as usize;

    for j in 0..spec.n_meta {
        let ju = j as u64;
        let cov = sample_inverse_wishart(&mut keyed_rng(spec.seed, TAG_COV, ju, 0), &spec.sigma0, spec.m)?;
        let meta_mean = sample_normal(
            &mut keyed_rng(spec.seed, TAG_META_MEAN, ju, 0),
            &spec.mu0,
            &(&cov / spec.kappa0),
        )?;
        let cov_chol = cholesky_lower(cov.clone())?;
        for i in 0..cpm {
            let class = spec.class_id(j, i);
            let iu = i as u64;
            let class_mean = sample_normal(
                &mut keyed_rng(spec.seed, TAG_CLASS_MEAN, ju, iu),
                &meta_mean,
                &(&cov / spec.kappa1),
            )?;
            let is_unseen = i == cpm - 1;
            let is_val = !is_unseen && i + 1 + spec.val_per_meta >= cpm;
            if is_unseen {
                unseen.push(class);
            } else {
                seen.push(class);
                if is_val {
                    val.push(class);
                }
            }
            let mut rng = keyed_rng(spec.seed, TAG_SAMPLES, ju, iu);
            let first_row = labels.len();
            for _ in 0..spec.samples_per_class {
                let x = &class_mean + &cov_chol * std_normal_vec(&mut rng, d);
                features.extend(x.iter().map(|&v| v as f32));
                labels.push(class);
            }
            let n_test = if is_unseen {
                spec.samples_per_class
            } else {
                n_test_seen.min(spec.samples_per_class - 1)
            };
            test_index.extend(first_row + spec.samples_per_class - n_test..first_row + spec.samples_per_class);

            let mut arng = keyed_rng(spec.seed, TAG_ATTR, ju, iu);
            let attr = &meta_mean + std_normal_vec(&mut arng, d) * spec.attr_noise;
            attributes.extend(attr.iter().map(|&v| v as f32));
            truth.class_means.push(class_mean);
            truth.meta_of_class.push(j);
        }
        truth.meta_means.push(meta_mean);
        truth.meta_covs.push(cov);
    }

    let dataset = Dataset::new(features, d, labels, attributes, d, None)?;
    let mut splits = SplitSpec::new(seen, unseen).with_test_index(test_index);
    if spec.val_per_meta > 0 {
        splits = splits.with_val_unseen(val);
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        dataset,
        splits,
        truth,
    })
}

/// Accuracy of the classifier that knows the true class densities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    /// Mean per-class accuracy over every class with test rows.
    pub accuracy: f64,
    pub ts: f64,
    pub tr: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// Classifies every test row by the true Gaussian `N(x | μ_ji, Σ_j)` over
/// all classes; the ceiling for any model fitted to the same data.
pub fn bayes_oracle_accuracy(data: &SyntheticData) -> Result<OracleReport> {
    let t = &data.truth;
    let gaussians: Vec<Gaussian> = t
        .class_means
        .iter()
        .zip(&t.meta_of_class)
        .map(|(mu, &j)| Gaussian::new(mu.clone(), t.meta_covs[j].clone()))
        .collect::<Result<_>>()?;
    let rows = data.splits.test_rows(&data.dataset);
    let mut predicted = Vec::with_capacity(rows.len());
    let mut truths = Vec::with_capacity(rows.len());
    for &r in &rows {
        let x = data.dataset.row_f64(r);
        let scores = gaussians.iter().map(|g| g.logpdf(&x)).collect::<Result<Vec<_>>>()?;
        predicted.push(argmax_first(scores).expect("at least one class"));
        truths.push(data.dataset.labels()[r]);
    }
    let all: Vec<usize> = (0..gaussians.len()).collect();
    let accuracy = per_class_top1(&predicted, &truths, &all)?.mean;
    let tr = per_class_top1(&predicted, &truths, &data.splits.seen_train)?.mean;
    let ts = per_class_top1(&predicted, &truths, &data.splits.unseen)?.mean;
    Ok(OracleReport {
        accuracy,
        ts,
        tr,
        h: harmonic_mean(tr, ts),
    })
}

/// Monte-Carlo estimate of a log predictive density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub log_density: f64,
    /// Standard error of `log_density` (delta method).
    pub std_error: f64,
    pub n_draws: usize,
}

const MC_CHUNK: usize = 1 << 16;

/// Estimates `log ∫ N(x | μ, Σ) p(μ, Σ | data) dμ dΣ` by sampling the
/// covariance from its Inverse-Wishart posterior and the class mean from its
/// conditional Gaussian, then averaging the Gaussian densities.
///
/// All posterior quantities are computed here from the class statistics; no
/// Student-t code is involved. Restricted to `D ≤ 2` and at least `1e5`
/// draws.
pub fn mc_ppd_oracle(
    x: &DVector<f64>,
    support: &[&ClassStats],
    current: Option<&ClassStats>,
    prior: &GlobalPrior,
    hp: &Hyperparams,
    n_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    let d = x.len();
    if d == 0 || d > 2 {
        return Err(Error::invalid("Monte-Carlo oracle supports D = 1 or 2 only"));
    }
    if n_draws < 100_000 {
        return Err(Error::invalid("Monte-Carlo oracle needs at least 1e5 draws"));
    }
    if support.is_empty() {
        return Err(Error::invalid("meta-class has no supporting classes"));
    }
    let sigma0 = match &prior.sigma0 {
        Scatter::Full(m) => m.clone(),
        Scatter::Diagonal(v) => DMatrix::from_diagonal(v),
    };
    if prior.mu0.len() != d || sigma0.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: prior.mu0.len(),
        });
    }
    let full = |s: &Scatter| match s {
        Scatter::Full(m) => m.clone(),
        Scatter::Diagonal(v) => DMatrix::from_diagonal(v),
    };

    // meta-class mean posterior from the support class means
    let mut prec = hp.kappa0;
    let mut weighted = &prior.mu0 * hp.kappa0;
    let mut post_scale = sigma0.clone();
    let mut post_dof = hp.m;
    for st in support {
        let n = st.count as f64;
        // x̄_i | μ_j ~ N(μ_j, Σ (1/n + 1/κ1))
        let w = 1.0 / (1.0 / n + 1.0 / hp.kappa1);
        prec += w;
        weighted += &st.mean * w;
        post_scale += full(&st.scatter);
        post_dof += n - 1.0;
    }
    let meta_mean = weighted / prec;
    // class-mean prior μ_c ~ N(meta_mean, Σ (1/prec + 1/κ1))
    let prior_prec = 1.0 / (1.0 / prec + 1.0 / hp.kappa1);
    let (mean_post, mean_prec) = match current {
        Some(cur) => {
            let n = cur.count as f64;
            let diff = &cur.mean - &meta_mean;
            post_scale += full(&cur.scatter) + (&diff * diff.transpose()) * (n * prior_prec / (n + prior_prec));
            post_dof += n;
            (
                (&cur.mean * n + &meta_mean * prior_prec) / (n + prior_prec),
                n + prior_prec,
            )
        }
        None => (meta_mean, prior_prec),
    };
    if !(post_dof > d as f64 - 1.0) || !(mean_prec > 0.0) {
        return Err(Error::Numerical("degenerate posterior parameters".into()));
    }

    // Σ = (B Bᵀ)⁻¹ with B = L A, L = chol(post_scale⁻¹), A the Bartlett factor;
    // μ = mean_post + B⁻ᵀ z / √mean_prec, so Bᵀ(x - μ) = Bᵀ(x - mean_post) - z / √mean_prec.
    let l = cholesky_lower(cholesky_inverse(&post_scale)?)?;
    let offset = x - &mean_post;
    let inv_sqrt_prec = 1.0 / mean_prec.sqrt();
    let log_2pi = (2.0 * std::f64::consts::PI).ln();

    let n_chunks = n_draws.div_ceil(MC_CHUNK);
    let chunk = |c: usize| -> Result<Vec<f64>> {
        let mut rng = keyed_rng(seed, TAG_MC, c as u64, 0);
        let len = MC_CHUNK.min(n_draws - c * MC_CHUNK);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let a = bartlett_factor(&mut rng, d, post_dof)?;
            let b = &l * a;
            let z = std_normal_vec(&mut rng, d);
            let u = b.tr_mul(&offset) - z * inv_sqrt_prec;
            let log_det_half: f64 = b.diagonal().iter().map(|v| v.ln()).sum();
            out.push(-0.5 * d as f64 * log_2pi + log_det_half - 0.5 * u.norm_squared());
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(chunk).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<f64>> = (0..n_chunks).map(chunk).collect::<Result<_>>()?;
    let logs: Vec<f64> = parts.concat();

    let n = logs.len() as f64;
    let lse = log_sum_exp(&logs);
    let log_mean = lse - n.ln();
    // relative spread of the density draws around their mean
    let rel_var = logs.iter().map(|l| ((l - log_mean).exp() - 1.0).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        log_density: log_mean,
        std_error: (rel_var / n).sqrt(),
        n_draws: logs.len(),
    })
}
