//! Commands behind the `bzsl` binary: evaluation, grid tuning on the
//! validation split, sensitivity sweeps, ablations and synthetic data.
//!
//! The in-memory functions ([`evaluate`], [`tune`], [`sweep`], [`ablate`])
//! do the work; the `cmd_*` wrappers load inputs from a [`RunConfig`] and
//! write result files.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::classifier::{fit_prepared, fit_v1, prepare, FitOptions, Model, SearchSpace, Variant, V2_KAPPA1};
use crate::dataset::{import_csv, load_bundle, save_bundle, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::metaclass::{build_meta_classes, AttrNorm, MetaClassMap};
use crate::modelfile;
use crate::ppd::{Hyperparams, Sigma0Source};
use crate::synth::{bayes_oracle_accuracy, sample_dataset, GenSpec};

/// Fraction of each seen class's training rows held out under the
/// validation protocol.
pub const DEFAULT_HOLDOUT: f64 = 0.2;
/// Feature dimension above which the unconstrained model projects to
/// [`DEFAULT_PCA_DIM`] dimensions by default.
pub const DEFAULT_PCA_DIM: usize = 500;
/// Top-K cut-offs reported by `eval` (those not exceeding the class count).
pub const DEFAULT_TOPK: [usize; 3] = [1, 2, 5];

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Bundle(PathBuf),
    Csv {
        features: PathBuf,
        attributes: PathBuf,
        splits: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, SplitSpec)> {
        match self {
            DataSource::Bundle(dir) => load_bundle(dir),
            DataSource::Csv {
                features,
                attributes,
                splits,
            } => {
                let dataset = import_csv(features, attributes)?;
                let text = fs::read_to_string(splits).map_err(|e| Error::io(splits, e))?;
                let mut spec: SplitSpec =
                    serde_json::from_str(&text).map_err(|e| Error::format(splits, e.line() as u64, e.to_string()))?;
                spec.normalize();
                spec.check(&dataset)?;
                Ok((dataset, spec))
            }
        }
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub variant: Variant,
    pub hyperparams: Hyperparams,
    /// `None` applies the default rule (see [`RunConfig::resolved_pca`]);
    /// `Some(0)` disables the projection.
    pub pca_dim: Option<usize>,
    pub attr_norm: AttrNorm,
    pub sigma0_source: Sigma0Source,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            variant: Variant::Unconstrained,
            hyperparams: Hyperparams::default(),
            pca_dim: None,
            attr_norm: AttrNorm::None,
            sigma0_source: Sigma0Source::Covariance,
            out: None,
            seed: 0,
            threads: None,
        }
    }
}

impl RunConfig {
    /// PCA target for features of dimension `dim`: the explicit setting, or
    /// [`DEFAULT_PCA_DIM`] for the unconstrained model on wider features.
    pub fn resolved_pca(&self, dim: usize) -> Option<usize> {
        match self.pca_dim {
            Some(0) => None,
            Some(d) => Some(d),
            None if self.variant == Variant::Unconstrained && dim > DEFAULT_PCA_DIM => Some(DEFAULT_PCA_DIM),
            None => None,
        }
    }

    pub fn fit_options(&self, dim: usize) -> FitOptions {
        FitOptions {
            variant: self.variant,
            pca_dim: self.resolved_pca(dim),
            attr_norm: self.attr_norm,
            sigma0_source: self.sigma0_source,
        }
    }

    fn load(&self) -> Result<(Dataset, SplitSpec)> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::invalid("no input: pass --bundle or --features-csv/--attributes-csv/--splits"))?
            .load()
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = self.out.as_deref().ok_or_else(|| Error::invalid("--out is required"))?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(out)
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub row_index: usize,
    pub predicted_class: usize,
    pub true_class: usize,
    pub log_score: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: Model,
    pub report: EvalReport,
    pub predictions: Vec<PredictionRow>,
}

fn score_model(model: Model, dataset: &Dataset, splits: &SplitSpec, ks: &[usize]) -> Result<Evaluation> {
    let rows = splits.test_rows(dataset);
    if rows.is_empty() {
        return Err(Error::invalid("split has no test rows"));
    }
    let preds = model.predict_rows(dataset, &rows, SearchSpace::Gzsl)?;
    let truths: Vec<usize> = rows.iter().map(|&r| dataset.labels()[r]).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.class_id).collect();
    let candidates = model.class_ids();
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k <= candidates.len()).collect();
    let scores: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| p.log_scores.iter().map(|&(_, s)| s).collect())
        .collect();
    let report = EvalReport::from_predictions(
        &predicted,
        &truths,
        &splits.seen_train,
        &splits.unseen,
        Some((&scores, &candidates, &ks)),
    )?;
    let predictions = rows
        .iter()
        .zip(&preds)
        .zip(&truths)
        .map(|((&row_index, p), &true_class)| PredictionRow {
            row_index,
            predicted_class: p.class_id,
            true_class,
            log_score: p.score_of(p.class_id).unwrap_or(f64::NAN),
        })
        .collect();
    Ok(Evaluation {
        model,
        report,
        predictions,
    })
}

/// Fits on the seen training rows and evaluates every test row over all
/// classes.
pub fn evaluate(dataset: &Dataset, splits: &SplitSpec, hp: &Hyperparams, opts: &FitOptions) -> Result<Evaluation> {
    let td = prepare(dataset, splits, opts.pca_dim, opts.variant.form())?;
    let model = fit_prepared(&td, dataset, splits, hp, opts)?;
    score_model(model, dataset, splits, &DEFAULT_TOPK)
}

/// [`evaluate`] under the validation protocol: validation classes act as
/// unseen classes and a holdout of each remaining seen class is scored.
pub fn evaluate_validation(
    dataset: &Dataset,
    splits: &SplitSpec,
    hp: &Hyperparams,
    opts: &FitOptions,
    holdout: f64,
) -> Result<Evaluation> {
    let (vd, vs) = splits.validation_view(dataset, holdout)?;
    evaluate(&vd, &vs, hp, opts)
}

/// A value of `m` in a tuning grid, possibly relative to the dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MValue {
    Abs(f64),
    /// `D + c`
    DPlus(f64),
    /// `c · D`
    TimesD(f64),
}

impl MValue {
    pub fn resolve(self, dim: usize) -> f64 {
        let d = dim as f64;
        match self {
            MValue::Abs(v) => v,
            MValue::DPlus(c) => d + c,
            MValue::TimesD(c) => c * d,
        }
    }
}

impl FromStr for MValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || Error::invalid(format!("bad value for m: {s:?} (use a number, D+c or cD)"));
        if let Some(rest) = t.strip_prefix("D+") {
            return rest.parse().map(MValue::DPlus).map_err(|_| bad());
        }
        if t == "D" {
            return Ok(MValue::TimesD(1.0));
        }
        if let Some(rest) = t.strip_suffix('D') {
            return rest
                .trim_end_matches('*')
                .parse()
                .map(MValue::TimesD)
                .map_err(|_| bad());
        }
        t.parse().map(MValue::Abs).map_err(|_| bad())
    }
}

/// Hyperparameter grid; every combination is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kappa0: Vec<f64>,
    pub kappa1: Vec<f64>,
    pub m: Vec<MValue>,
    pub s: Vec<f64>,
    pub k: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            kappa0: vec![0.01, 0.1, 1.0],
            kappa1: vec![1.0, 5.0, 10.0, 25.0],
            m: vec![MValue::DPlus(2.0), MValue::TimesD(5.0), MValue::TimesD(25.0)],
            s: vec![1.0, 5.0, 10.0],
            k: vec![1, 2, 3, 5, 10],
        }
    }
}

impl Grid {
    pub fn single(hp: &Hyperparams) -> Self {
        Self {
            kappa0: vec![hp.kappa0],
            kappa1: vec![hp.kappa1],
            m: vec![MValue::Abs(hp.m)],
            s: vec![hp.s],
            k: vec![hp.k],
        }
    }

    pub fn len(&self) -> usize {
        self.kappa0.len() * self.kappa1.len() * self.m.len() * self.s.len() * self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All grid points in lexicographic `(κ0, κ1, m, s, K)` order. In the
    /// constrained model each point sets `a0 = m / 2` and leaves `b0` to be
    /// derived from `s`.
    pub fn points(&self, dim: usize, variant: Variant) -> Vec<Hyperparams> {
        let mut out = Vec::with_capacity(self.len());
        for &kappa0 in &self.kappa0 {
            for &kappa1 in &self.kappa1 {
                for m in &self.m {
                    let m = m.resolve(dim);
                    for &s in &self.s {
                        for &k in &self.k {
                            out.push(Hyperparams {
                                kappa0,
                                kappa1,
                                m,
                                s,
                                k,
                                a0: (variant == Variant::Constrained).then_some(m / 2.0),
                                b0: None,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardRow {
    pub hyperparams: Hyperparams,
    pub ts: f64,
    pub tr: f64,
    #[serde(rename = "H")]
    pub h: f64,
    /// Why the point could not be evaluated, if it failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub best: Hyperparams,
    pub best_row: LeaderboardRow,
    /// Every grid point, best first; failed points last in grid order.
    pub leaderboard: Vec<LeaderboardRow>,
}

fn hp_key(hp: &Hyperparams) -> [f64; 5] {
    [hp.kappa0, hp.kappa1, hp.m, hp.s, hp.k as f64]
}

/// Ranking: higher H, then higher ts, then the smaller hyperparameter tuple.
fn rank_order(a: &LeaderboardRow, b: &LeaderboardRow) -> Ordering {
    match (&a.error, &b.error) {
        (None, Some(_)) => return Ordering::Less,
        (Some(_), None) => return Ordering::Greater,
        (Some(_), Some(_)) => return Ordering::Equal,
        (None, None) => {}
    }
    b.h.total_cmp(&a.h).then(b.ts.total_cmp(&a.ts)).then_with(|| {
        hp_key(&a.hyperparams)
            .iter()
            .zip(hp_key(&b.hyperparams).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Exhaustive grid search maximizing H under the validation protocol.
/// Points whose hyperparameters are infeasible (or whose fit fails) stay on
/// the leaderboard with their error.
pub fn tune(dataset: &Dataset, splits: &SplitSpec, grid: &Grid, opts: &FitOptions, holdout: f64) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::invalid("tuning grid is empty"));
    }
    if splits.val_unseen.as_ref().is_none_or(|v| v.is_empty()) {
        return Err(Error::invalid(
            "tuning needs validation classes (val_unseen) in the split",
        ));
    }
    let (vd, vs) = splits.validation_view(dataset, holdout)?;
    let td = prepare(&vd, &vs, opts.pca_dim, opts.variant.form())?;
    let points = grid.points(td.dim(), opts.variant);
    let rows: Vec<LeaderboardRow> = par_map(&points, |hp| {
        let run = fit_prepared(&td, &vd, &vs, hp, opts).and_then(|m| score_model(m, &vd, &vs, &[]));
        match run {
            Ok(e) => LeaderboardRow {
                hyperparams: *hp,
                ts: e.report.ts,
                tr: e.report.tr,
                h: e.report.h,
                error: None,
            },
            Err(err) => LeaderboardRow {
                hyperparams: *hp,
                ts: f64::NAN,
                tr: f64::NAN,
                h: f64::NAN,
                error: Some(err.to_string()),
            },
        }
    });
    let mut leaderboard = rows;
    leaderboard.sort_by(rank_order);
    let best_row = leaderboard
        .first()
        .filter(|r| r.error.is_none())
        .cloned()
        .ok_or_else(|| {
            let reason = leaderboard.first().and_then(|r| r.error.clone()).unwrap_or_default();
            Error::Hyperparams(format!("no grid point could be evaluated (first error: {reason})"))
        })?;
    Ok(TuneResult {
        best: best_row.hyperparams,
        best_row,
        leaderboard,
    })
}

/// Parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Kappa0,
    Kappa1,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kappa0" => Ok(SweepParam::Kappa0),
            "kappa1" => Ok(SweepParam::Kappa1),
            _ => Err(Error::invalid(format!(
                "unknown sweep parameter {s:?} (kappa0 or kappa1)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub ts: f64,
    pub tr: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// One evaluation per value with every other setting fixed.
pub fn sweep(
    dataset: &Dataset,
    splits: &SplitSpec,
    base: &Hyperparams,
    param: SweepParam,
    values: &[f64],
    opts: &FitOptions,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("no sweep values"));
    }
    let td = prepare(dataset, splits, opts.pca_dim, opts.variant.form())?;
    par_map(values, |&value| {
        let hp = match param {
            SweepParam::Kappa0 => Hyperparams { kappa0: value, ..*base },
            SweepParam::Kappa1 => Hyperparams { kappa1: value, ..*base },
        };
        let model = fit_prepared(&td, dataset, splits, &hp, opts)?;
        let r = score_model(model, dataset, splits, &[])?.report;
        Ok(SweepRow {
            value,
            ts: r.ts,
            tr: r.tr,
            h: r.h,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub ts: f64,
    pub tr: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// The full model against V1 (no priors) and V2 (`κ1` forced to
/// [`V2_KAPPA1`]) on the same split.
pub fn ablate(dataset: &Dataset, splits: &SplitSpec, hp: &Hyperparams, opts: &FitOptions) -> Result<Vec<AblationRow>> {
    let row = |name: &str, model: Model| -> Result<AblationRow> {
        let r = score_model(model, dataset, splits, &[])?.report;
        Ok(AblationRow {
            model: name.into(),
            ts: r.ts,
            tr: r.tr,
            h: r.h,
        })
    };
    let td = prepare(dataset, splits, opts.pca_dim, opts.variant.form())?;
    let full = fit_prepared(&td, dataset, splits, hp, opts)?;
    let v1 = fit_v1(dataset, splits, hp, opts)?;
    let v2 = fit_prepared(
        &td,
        dataset,
        splits,
        &Hyperparams {
            kappa1: V2_KAPPA1,
            ..*hp
        },
        opts,
    )?;
    Ok(vec![row("full", full)?, row("V1", v1)?, row("V2", v2)?])
}

/// Renders the ablation rows as a percent table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>8}", "model", "ts", "tr", "H");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} {:>8.1} {:>8.1} {:>8.1}",
            r.model,
            100.0 * r.ts,
            100.0 * r.tr,
            100.0 * r.h
        );
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("result types serialize")
}

/// Fits, evaluates and writes `report.json`, `report.txt` and
/// `predictions.csv` into `--out`. With `validation` the validation
/// protocol is used instead of the test split.
pub fn cmd_eval(cfg: &RunConfig, validation: bool) -> Result<EvalReport> {
    let (dataset, splits) = cfg.load()?;
    let opts = cfg.fit_options(dataset.dim());
    let e = if validation {
        evaluate_validation(&dataset, &splits, &cfg.hyperparams, &opts, DEFAULT_HOLDOUT)?
    } else {
        evaluate(&dataset, &splits, &cfg.hyperparams, &opts)?
    };
    if cfg.out.is_some() {
        let out = cfg.out_dir()?;
        write_file(&out.join("report.json"), to_json(&e.report))?;
        write_file(&out.join("report.txt"), e.report.to_table())?;
        write_csv(&out.join("predictions.csv"), &e.predictions)?;
    }
    Ok(e.report)
}

/// Grid search; writes `leaderboard.csv` and `best.json`.
pub fn cmd_tune(cfg: &RunConfig, grid: &Grid) -> Result<TuneResult> {
    let (dataset, splits) = cfg.load()?;
    let opts = cfg.fit_options(dataset.dim());
    let result = tune(&dataset, &splits, grid, &opts, DEFAULT_HOLDOUT)?;
    if cfg.out.is_some() {
        let out = cfg.out_dir()?;
        write_file(&out.join("best.json"), to_json(&result.best_row))?;
        let path = out.join("leaderboard.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        w.write_record([
            "rank", "kappa0", "kappa1", "m", "s", "K", "a0", "b0", "ts", "tr", "H", "error",
        ])
        .map_err(|e| Error::io(&path, e.into()))?;
        for (i, r) in result.leaderboard.iter().enumerate() {
            let hp = &r.hyperparams;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                (i + 1).to_string(),
                hp.kappa0.to_string(),
                hp.kappa1.to_string(),
                hp.m.to_string(),
                hp.s.to_string(),
                hp.k.to_string(),
                opt(hp.a0),
                opt(hp.b0),
                r.ts.to_string(),
                r.tr.to_string(),
                r.h.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::io(&path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

/// Sweep; writes `sweep_<param>.csv` with columns `value,ts,tr,H`.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    let (dataset, splits) = cfg.load()?;
    let opts = cfg.fit_options(dataset.dim());
    let rows = sweep(&dataset, &splits, &cfg.hyperparams, param, values, &opts)?;
    if cfg.out.is_some() {
        let out = cfg.out_dir()?;
        let name = match param {
            SweepParam::Kappa0 => "sweep_kappa0.csv",
            SweepParam::Kappa1 => "sweep_kappa1.csv",
        };
        write_csv(&out.join(name), &rows)?;
    }
    Ok(rows)
}

/// Ablation; writes `ablation.csv` and `ablation.txt`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let (dataset, splits) = cfg.load()?;
    let opts = cfg.fit_options(dataset.dim());
    let rows = ablate(&dataset, &splits, &cfg.hyperparams, &opts)?;
    if cfg.out.is_some() {
        let out = cfg.out_dir()?;
        write_csv(&out.join("ablation.csv"), &rows)?;
        write_file(&out.join("ablation.txt"), ablation_table(&rows))?;
    }
    Ok(rows)
}

#[derive(Serialize)]
struct TruthFile<'a> {
    spec: &'a GenSpec,
    truth: &'a crate::synth::GroundTruth,
    oracle: crate::synth::OracleReport,
}

/// Samples a dataset and writes it as a bundle plus `truth.json` into
/// `--out`.
pub fn cmd_synth(cfg: &RunConfig, spec: &GenSpec) -> Result<()> {
    let data = sample_dataset(spec)?;
    let out = cfg.out_dir()?;
    save_bundle(&data.dataset, &data.splits, out)?;
    let truth = TruthFile {
        spec,
        truth: &data.truth,
        oracle: bayes_oracle_accuracy(&data)?,
    };
    write_file(&out.join("truth.json"), to_json(&truth))
}

/// Meta-class supports for `--K`; written to `--out` when set.
pub fn cmd_metaclass_dump(cfg: &RunConfig) -> Result<MetaClassMap> {
    let (dataset, splits) = cfg.load()?;
    let map = build_meta_classes(&dataset, &splits, cfg.hyperparams.k, cfg.attr_norm)?;
    if let Some(out) = &cfg.out {
        write_file(out, serde_json::to_string_pretty(&map.to_json()).expect("json"))?;
    }
    Ok(map)
}

/// Fits the model and writes the binary model file to `--out`.
pub fn cmd_model_dump(cfg: &RunConfig) -> Result<Model> {
    let (dataset, splits) = cfg.load()?;
    let opts = cfg.fit_options(dataset.dim());
    let td = prepare(&dataset, &splits, opts.pca_dim, opts.variant.form())?;
    let model = fit_prepared(&td, &dataset, &splits, &cfg.hyperparams, &opts)?;
    let out = cfg.out.as_deref().ok_or_else(|| Error::invalid("--out is required"))?;
    modelfile::save(&model, out)?;
    Ok(model)
}
