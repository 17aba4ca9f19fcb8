//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Scene`] is a small two-dimensional synthetic problem with a fitted
//! model; the page paints its decision field. [`kappa_sweep`] and
//! [`ppd_curve`] back the other two panels.

use bzsl::classifier::{fit, FitOptions, Model, SearchSpace, Variant};
use bzsl::cli::{evaluate, sweep, SweepParam};
use bzsl::eval::EvalReport;
use bzsl::ppd::{global_prior, meta_posterior, seen_ppd, unseen_ppd, Hyperparams, Sigma0Source};
use bzsl::stats::class_stats;
use bzsl::synth::{sample_dataset, GenSpec, SyntheticData};
use nalgebra::{DMatrix, DVector};
use wasm_bindgen::prelude::*;

/// Three meta-classes of four classes in the plane, the last class of each
/// meta-class unseen.
pub fn demo_spec(seed: u64) -> GenSpec {
    GenSpec {
        n_meta: 3,
        classes_per_meta: 4,
        samples_per_class: 60,
        dim: 2,
        kappa0: 0.1,
        kappa1: 0.5,
        m: 8.0,
        sigma0: DMatrix::identity(2, 2),
        mu0: DVector::zeros(2),
        seed,
        attr_noise: 0.05,
        test_fraction: 0.25,
        val_per_meta: 0,
    }
}

fn hyperparams(kappa0: f64, kappa1: f64, m: f64, k: usize) -> Hyperparams {
    Hyperparams {
        kappa0,
        kappa1,
        m,
        k,
        ..Hyperparams::default()
    }
}

fn opts() -> FitOptions {
    FitOptions::new(Variant::Unconstrained)
}

#[wasm_bindgen]
pub struct Scene {
    data: SyntheticData,
    model: Model,
    report: EvalReport,
}

impl Scene {
    pub fn try_new(seed: u64, kappa0: f64, kappa1: f64, m: f64, k: usize) -> Result<Scene, String> {
        let data = sample_dataset(&demo_spec(seed)).map_err(|e| e.to_string())?;
        let hp = hyperparams(kappa0, kappa1, m, k);
        let model = fit(&data.dataset, &data.splits, &hp, &opts()).map_err(|e| e.to_string())?;
        let report = evaluate(&data.dataset, &data.splits, &hp, &opts())
            .map_err(|e| e.to_string())?
            .report;
        Ok(Scene { data, model, report })
    }

    pub fn try_field(&self, x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<Vec<f64>, String> {
        if nx < 2 || ny < 2 {
            return Err("field needs at least 2 x 2 cells".into());
        }
        let rows = DMatrix::from_fn(nx * ny, 2, |i, c| {
            let (ix, iy) = (i % nx, i / nx);
            if c == 0 {
                x0 + (x1 - x0) * ix as f64 / (nx - 1) as f64
            } else {
                y1 - (y1 - y0) * iy as f64 / (ny - 1) as f64
            }
        });
        let scores = self.model.score_rows(&rows).map_err(|e| e.to_string())?;
        let ids = self.model.class_ids();
        let mut out = Vec::with_capacity(2 * nx * ny);
        for row in scores.row_iter() {
            // first maximum wins, matching the classifier's tie rule
            let (best, score) =
                row.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc },
                );
            out.push(ids[best] as f64);
            out.push(score);
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, kappa0: f64, kappa1: f64, m: f64, k: usize) -> Result<Scene, JsError> {
        Scene::try_new(seed, kappa0, kappa1, m, k).map_err(|e| JsError::new(&e))
    }

    /// `x, y, class, is_test` per row.
    pub fn points(&self) -> Vec<f64> {
        let ds = &self.data.dataset;
        let mut test = vec![false; ds.n_rows()];
        for r in self.data.splits.test_rows(ds) {
            test[r] = true;
        }
        (0..ds.n_rows())
            .flat_map(|r| {
                let x = ds.row_f64(r);
                [x[0], x[1], ds.labels()[r] as f64, f64::from(u8::from(test[r]))]
            })
            .collect()
    }

    pub fn unseen(&self) -> Vec<u32> {
        self.data.splits.unseen.iter().map(|&c| c as u32).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.data.spec.n_classes()
    }

    /// Predicted class and its log-density on an `nx × ny` grid, row by row
    /// from the top edge.
    pub fn field(&self, x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<Vec<f64>, JsError> {
        self.try_field(x0, x1, y0, y1, nx, ny).map_err(|e| JsError::new(&e))
    }

    /// `ts, tr, H` on the test rows.
    pub fn metrics(&self) -> Vec<f64> {
        vec![self.report.ts, self.report.tr, self.report.h]
    }

    /// GZSL prediction for one point.
    pub fn classify(&self, x: f64, y: f64) -> Option<u32> {
        let p = self
            .model
            .predict(&DVector::from_vec(vec![x, y]), SearchSpace::Gzsl)
            .ok()?;
        Some(p.class_id as u32)
    }
}

pub fn try_kappa_sweep(seed: u64, param: &str, values: &[f64], base: [f64; 3], k: usize) -> Result<Vec<f64>, String> {
    let param: SweepParam = param.parse().map_err(|e: bzsl::Error| e.to_string())?;
    let data = sample_dataset(&demo_spec(seed)).map_err(|e| e.to_string())?;
    let hp = hyperparams(base[0], base[1], base[2], k);
    let rows = sweep(&data.dataset, &data.splits, &hp, param, values, &opts()).map_err(|e| e.to_string())?;
    Ok(rows.iter().flat_map(|r| [r.ts, r.tr, r.h]).collect())
}

/// `ts, tr, H` per value of `kappa0` or `kappa1`, the other settings fixed.
#[wasm_bindgen]
pub fn kappa_sweep(
    seed: u64,
    param: &str,
    values: Vec<f64>,
    kappa0: f64,
    kappa1: f64,
    m: f64,
    k: usize,
) -> Result<Vec<f64>, JsError> {
    try_kappa_sweep(seed, param, &values, [kappa0, kappa1, m], k).map_err(|e| JsError::new(&e))
}

#[allow(clippy::too_many_arguments)]
pub fn try_ppd_curve(
    current: &[f64],
    support: &[f64],
    sizes: &[u32],
    kappa0: f64,
    kappa1: f64,
    m: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, String> {
    if n < 2 || hi <= lo {
        return Err("need n >= 2 and hi > lo".into());
    }
    if sizes.iter().map(|&s| s as usize).sum::<usize>() != support.len() {
        return Err("support sizes do not add up to the sample count".into());
    }
    let stats = |xs: &[f64]| class_stats(&DMatrix::from_column_slice(xs.len(), 1, xs)).map_err(|e| e.to_string());
    let cur = stats(current)?;
    let mut sup = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        sup.push(stats(&support[at..at + s as usize])?);
        at += s as usize;
    }
    let sup_refs: Vec<_> = sup.iter().collect();
    let mut pool = sup_refs.clone();
    pool.push(&cur);
    let hp = hyperparams(kappa0, kappa1, m, sup.len());
    let err = |e: bzsl::Error| e.to_string();
    let prior = global_prior(&pool, hp.s, Sigma0Source::Covariance).map_err(err)?;
    let mp = meta_posterior(&sup_refs, &prior, &hp, Some(&cur)).map_err(err)?;
    let seen = seen_ppd(0, &cur, &mp, &prior, &hp).map_err(err)?.student_t;
    let mp = meta_posterior(&sup_refs, &prior, &hp, None).map_err(err)?;
    let unseen = unseen_ppd(1, &mp, &prior, &hp).map_err(err)?.student_t;
    let mut out = Vec::with_capacity(2 * n);
    for t in [&seen, &unseen] {
        for i in 0..n {
            let x = DVector::from_element(1, lo + (hi - lo) * i as f64 / (n - 1) as f64);
            out.push(t.logpdf(&x).map_err(err)?.exp());
        }
    }
    Ok(out)
}

/// One-dimensional predictive densities on `n` points of `[lo, hi]`: the
/// seen class built from `current`, then an unseen class with the same
/// support. `support` holds the samples of each support class back to back,
/// `sizes` their counts.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn ppd_curve(
    current: Vec<f64>,
    support: Vec<f64>,
    sizes: Vec<u32>,
    kappa0: f64,
    kappa1: f64,
    m: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    try_ppd_curve(&current, &support, &sizes, kappa0, kappa1, m, lo, hi, n).map_err(|e| JsError::new(&e))
}
