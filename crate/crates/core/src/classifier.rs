//! End-to-end model: fitting every class density and maximum-likelihood
//! classification, plus the two ablation variants.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metaclass::{build_meta_classes, AttrNorm, MetaClassMap};
use crate::ppd::{
    self, global_prior, global_prior_diag, meta_posterior_with_scatter, support_scatter_sum, ClassPpd, CovForm,
    GlobalPrior, Hyperparams, Sigma0Source,
};
use crate::stats::{
    class_stats, class_stats_diag, log_sum_exp, pca_apply, pca_apply_vec, pca_fit, ClassStats, Gaussian, PcaModel,
    Scatter,
};

/// Default `κ1` forced by the V2 ablation.
pub const V2_KAPPA1: f64 = 1e-3;
/// Relative ridge added to V1 covariances: `ε = V1_RIDGE · trace(C) / D`.
pub const V1_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full covariances with an Inverse-Wishart prior.
    Unconstrained,
    /// Diagonal covariances with an Inverse-Gamma prior per axis.
    Constrained,
    /// No priors: one Gaussian per seen class, an equal-weight mixture of the
    /// supporting Gaussians per unseen class.
    AblationV1,
}

impl Variant {
    pub fn form(self) -> CovForm {
        match self {
            Variant::Constrained => CovForm::Diagonal,
            Variant::Unconstrained | Variant::AblationV1 => CovForm::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub variant: Variant,
    /// PCA target dimension; `None` keeps the raw features.
    pub pca_dim: Option<usize>,
    pub attr_norm: AttrNorm,
    pub sigma0_source: Sigma0Source,
}

impl FitOptions {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            pca_dim: None,
            attr_norm: AttrNorm::None,
            sigma0_source: Sigma0Source::Covariance,
        }
    }

    pub fn with_pca(mut self, dim: Option<usize>) -> Self {
        self.pca_dim = dim;
        self
    }
}

/// Which classes compete at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    Gzsl,
    ZslUnseenOnly,
    SeenOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassDensity {
    Ppd(ClassPpd),
    Gaussian { class_id: usize, gaussian: Gaussian },
    Mixture { class_id: usize, components: Vec<Gaussian> },
}

impl ClassDensity {
    pub fn class_id(&self) -> usize {
        match self {
            ClassDensity::Ppd(p) => p.class_id,
            ClassDensity::Gaussian { class_id, .. } | ClassDensity::Mixture { class_id, .. } => *class_id,
        }
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            ClassDensity::Ppd(p) => p.student_t.logpdf(x),
            ClassDensity::Gaussian { gaussian, .. } => gaussian.logpdf(x),
            ClassDensity::Mixture { components, .. } => {
                let lps = components.iter().map(|g| g.logpdf(x)).collect::<Result<Vec<_>>>()?;
                Ok(log_sum_exp(&lps) - (components.len() as f64).ln())
            }
        }
    }

    fn logpdf_rows(&self, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            ClassDensity::Ppd(p) => p.student_t.logpdf_rows(rows),
            _ => rows.row_iter().map(|r| self.logpdf(&r.transpose())).collect(),
        }
    }
}

/// A fitted classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub hyperparams: Hyperparams,
    pub pca: Option<PcaModel>,
    /// One density per seen and unseen class, ascending class id.
    pub densities: Vec<ClassDensity>,
    pub meta_map: MetaClassMap,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Dimension of the raw input vectors.
    pub input_dim: usize,
}

/// Winning class and the per-class log-scores of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    /// `(class, log-density)` for every class of the search space, ascending id.
    pub log_scores: Vec<(usize, f64)>,
}

impl Prediction {
    pub fn score_of(&self, class: usize) -> Option<f64> {
        self.log_scores
            .binary_search_by_key(&class, |(c, _)| *c)
            .ok()
            .map(|i| self.log_scores[i].1)
    }
}

/// Index of the highest score; ties go to the earliest entry.
pub fn argmax_first(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-class statistics of the seen training rows, with the optional PCA
/// fitted on those rows. Independent of the hyperparameters, so one instance
/// serves a whole tuning grid.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub pca: Option<PcaModel>,
    pub stats: BTreeMap<usize, ClassStats>,
    pub form: CovForm,
    pub input_dim: usize,
}

impl TrainingData {
    pub fn dim(&self) -> usize {
        self.pca.as_ref().map_or(self.input_dim, PcaModel::output_dim)
    }
}

pub fn prepare(dataset: &Dataset, splits: &SplitSpec, pca_dim: Option<usize>, form: CovForm) -> Result<TrainingData> {
    splits.check(dataset)?;
    let rows = splits.seen_training_rows(dataset);
    let by_class = dataset.rows_by_class(&rows);
    if let Some(&empty) = splits.seen_train.iter().find(|c| !by_class.contains_key(c)) {
        return Err(Error::invalid(format!("seen class {empty} has no training rows")));
    }
    let raw = dataset.rows_matrix(&rows);
    let pca = match pca_dim {
        Some(d) if d < dataset.dim() => Some(pca_fit(&raw, d)?),
        Some(d) if d > dataset.dim() => {
            return Err(Error::invalid(format!(
                "PCA dimension {d} exceeds feature dimension {}",
                dataset.dim()
            )))
        }
        _ => None,
    };
    let data = match &pca {
        Some(p) => pca_apply(p, &raw)?,
        None => raw,
    };
    let mut position = HashMap::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        position.insert(r, i);
    }
    let mut stats = BTreeMap::new();
    for (class, class_rows) in by_class {
        let idx: Vec<usize> = class_rows.iter().map(|r| position[r]).collect();
        let m = data.select_rows(idx.iter());
        let st = match form {
            CovForm::Full => class_stats(&m)?,
            CovForm::Diagonal => class_stats_diag(&m)?,
        };
        stats.insert(class, st);
    }
    Ok(TrainingData {
        pca,
        stats,
        form,
        input_dim: dataset.dim(),
    })
}

#[cfg(feature = "parallel")]
fn map_classes<T, F>(items: &[(usize, bool)], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&(usize, bool)) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_classes<T, F>(items: &[(usize, bool)], f: F) -> Result<Vec<T>>
where
    F: Fn(&(usize, bool)) -> Result<T>,
{
    items.iter().map(f).collect()
}

fn targets(splits: &SplitSpec) -> Vec<(usize, bool)> {
    let mut t: Vec<(usize, bool)> = splits
        .seen_train
        .iter()
        .map(|&c| (c, true))
        .chain(splits.unseen.iter().map(|&c| (c, false)))
        .collect();
    t.sort_unstable();
    t
}

fn support_stats<'a>(td: &'a TrainingData, support: &[usize]) -> Vec<&'a ClassStats> {
    support.iter().map(|c| &td.stats[c]).collect()
}

fn build_prior(td: &TrainingData, hp: &Hyperparams, source: Sigma0Source, seen: &[usize]) -> Result<GlobalPrior> {
    let stats = support_stats(td, seen);
    match td.form {
        CovForm::Full => global_prior(&stats, hp.s, source),
        CovForm::Diagonal => global_prior_diag(&stats, hp, source),
    }
}

/// Fits a model on prepared training data.
pub fn fit_prepared(
    td: &TrainingData,
    dataset: &Dataset,
    splits: &SplitSpec,
    hp: &Hyperparams,
    opts: &FitOptions,
) -> Result<Model> {
    if opts.variant.form() != td.form {
        return Err(Error::invalid(
            "training data was prepared for a different covariance form",
        ));
    }
    let dim = td.dim();
    let meta_map = build_meta_classes(dataset, splits, hp.k, opts.attr_norm)?;
    let items = targets(splits);

    let densities = match opts.variant {
        Variant::AblationV1 => {
            if hp.k == 0 {
                return Err(Error::Hyperparams("K must be at least 1".into()));
            }
            fit_v1_densities(td, &meta_map, &items)?
        }
        Variant::Unconstrained | Variant::Constrained => {
            hp.validate(dim, td.form)?;
            let prior = build_prior(td, hp, opts.sigma0_source, &splits.seen_train)?;

            let mut keys: Vec<Vec<usize>> = meta_map
                .entries
                .values()
                .map(|s| {
                    let mut k = s.support.clone();
                    k.sort_unstable();
                    k
                })
                .collect();
            keys.sort();
            keys.dedup();
            let scatter_cache: HashMap<Vec<usize>, Scatter> = keys
                .into_iter()
                .map(|k| {
                    let sum = support_scatter_sum(&support_stats(td, &k), &prior);
                    (k, sum)
                })
                .collect();

            let form = td.form;
            map_classes(&items, |&(class, is_seen)| {
                let entry = &meta_map.entries[&class];
                let sup = support_stats(td, &entry.support);
                let mut key = entry.support.clone();
                key.sort_unstable();
                let scatter_sum = scatter_cache[&key].clone();
                let ppd = if is_seen {
                    let cur = &td.stats[&class];
                    let mp = meta_posterior_with_scatter(&sup, scatter_sum, &prior, hp, Some(cur))?;
                    match form {
                        CovForm::Full => ppd::seen_ppd(class, cur, &mp, &prior, hp)?,
                        CovForm::Diagonal => ppd::seen_ppd_diag(class, cur, &mp, &prior, hp)?,
                    }
                } else {
                    let mp = meta_posterior_with_scatter(&sup, scatter_sum, &prior, hp, None)?;
                    match form {
                        CovForm::Full => ppd::unseen_ppd(class, &mp, &prior, hp)?,
                        CovForm::Diagonal => ppd::unseen_ppd_diag(class, &mp, &prior, hp)?,
                    }
                };
                Ok(ClassDensity::Ppd(ppd))
            })?
        }
    };

    Ok(Model {
        variant: opts.variant,
        hyperparams: *hp,
        pca: td.pca.clone(),
        densities,
        meta_map,
        seen: splits.seen_train.clone(),
        unseen: splits.unseen.clone(),
        input_dim: td.input_dim,
    })
}

fn v1_gaussian(st: &ClassStats) -> Result<Gaussian> {
    let d = st.dim();
    let mut cov = match st.covariance() {
        Some(Scatter::Full(c)) => c,
        Some(Scatter::Diagonal(v)) => DMatrix::from_diagonal(&v),
        None => DMatrix::zeros(d, d),
    };
    let eps = V1_RIDGE * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Gaussian::new(st.mean.clone(), cov)
}

fn fit_v1_densities(td: &TrainingData, meta_map: &MetaClassMap, items: &[(usize, bool)]) -> Result<Vec<ClassDensity>> {
    let gaussians: BTreeMap<usize, Gaussian> = td
        .stats
        .iter()
        .map(|(&c, st)| v1_gaussian(st).map(|g| (c, g)))
        .collect::<Result<_>>()?;
    items
        .iter()
        .map(|&(class, is_seen)| {
            Ok(if is_seen {
                ClassDensity::Gaussian {
                    class_id: class,
                    gaussian: gaussians[&class].clone(),
                }
            } else {
                let support = &meta_map.entries[&class].support;
                ClassDensity::Mixture {
                    class_id: class,
                    components: support.iter().map(|c| gaussians[c].clone()).collect(),
                }
            })
        })
        .collect()
}

/// Fits the full pipeline: optional PCA, class statistics, meta-classes and
/// one density per seen and unseen class.
pub fn fit(dataset: &Dataset, splits: &SplitSpec, hp: &Hyperparams, opts: &FitOptions) -> Result<Model> {
    let td = prepare(dataset, splits, opts.pca_dim, opts.variant.form())?;
    fit_prepared(&td, dataset, splits, hp, opts)
}

/// Ablation without priors (see [`Variant::AblationV1`]).
pub fn fit_v1(dataset: &Dataset, splits: &SplitSpec, hp: &Hyperparams, opts: &FitOptions) -> Result<Model> {
    let opts = FitOptions {
        variant: Variant::AblationV1,
        ..*opts
    };
    fit(dataset, splits, hp, &opts)
}

/// Ablation with `κ1` forced to `kappa1` so class means are as dispersed
/// around their meta-class as meta-classes are around the data center.
pub fn fit_v2(
    dataset: &Dataset,
    splits: &SplitSpec,
    hp: &Hyperparams,
    opts: &FitOptions,
    kappa1: f64,
) -> Result<Model> {
    let forced = Hyperparams { kappa1, ..*hp };
    fit(dataset, splits, &forced, opts)
}

impl Model {
    /// Dimension of the space the densities live in.
    pub fn dim(&self) -> usize {
        self.pca.as_ref().map_or(self.input_dim, PcaModel::output_dim)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.densities.iter().map(ClassDensity::class_id).collect()
    }

    pub fn density(&self, class: usize) -> Option<&ClassDensity> {
        self.densities
            .binary_search_by_key(&class, ClassDensity::class_id)
            .ok()
            .map(|i| &self.densities[i])
    }

    pub fn ppd(&self, class: usize) -> Option<&ClassPpd> {
        match self.density(class)? {
            ClassDensity::Ppd(p) => Some(p),
            _ => None,
        }
    }

    fn in_space(&self, class: usize, space: SearchSpace) -> bool {
        match space {
            SearchSpace::Gzsl => true,
            SearchSpace::ZslUnseenOnly => self.unseen.binary_search(&class).is_ok(),
            SearchSpace::SeenOnly => self.seen.binary_search(&class).is_ok(),
        }
    }

    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        match &self.pca {
            Some(p) => pca_apply_vec(p, x),
            None => Ok(x.clone()),
        }
    }

    /// Classifies one raw feature vector.
    pub fn predict(&self, x: &DVector<f64>, space: SearchSpace) -> Result<Prediction> {
        let z = self.project(x)?;
        let log_scores = self
            .densities
            .iter()
            .filter(|d| self.in_space(d.class_id(), space))
            .map(|d| d.logpdf(&z).map(|s| (d.class_id(), s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::decide(log_scores))
    }

    fn decide(log_scores: Vec<(usize, f64)>) -> Prediction {
        let best = argmax_first(log_scores.iter().map(|(_, s)| *s)).expect("search space is non-empty");
        Prediction {
            class_id: log_scores[best].0,
            log_scores,
        }
    }

    /// Log-densities of each raw row (`n × D`) under every class, as an
    /// `n × C` matrix with columns in `class_ids()` order.
    pub fn score_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: rows.ncols(),
            });
        }
        let z = match &self.pca {
            Some(p) => pca_apply(p, rows)?,
            None => rows.clone(),
        };
        #[cfg(feature = "parallel")]
        let cols: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            self.densities
                .par_iter()
                .map(|d| d.logpdf_rows(&z))
                .collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let cols: Vec<Vec<f64>> = self
            .densities
            .iter()
            .map(|d| d.logpdf_rows(&z))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(rows.nrows(), cols.len(), |r, c| cols[c][r]))
    }

    /// Classifies dataset rows.
    pub fn predict_rows(&self, dataset: &Dataset, rows: &[usize], space: SearchSpace) -> Result<Vec<Prediction>> {
        let m = dataset.rows_matrix(rows);
        let scores = self.score_rows(&m)?;
        let ids = self.class_ids();
        let keep: Vec<usize> = (0..ids.len()).filter(|&j| self.in_space(ids[j], space)).collect();
        if keep.is_empty() {
            return Err(Error::invalid("search space is empty"));
        }
        Ok((0..rows.len())
            .map(|r| Self::decide(keep.iter().map(|&j| (ids[j], scores[(r, j)])).collect()))
            .collect())
    }
}
