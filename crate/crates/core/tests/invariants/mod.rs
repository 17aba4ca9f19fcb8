//! Properties each module must satisfy. The per-module test targets run
//! them one by one; the acceptance report runs the whole registry.
#![allow(dead_code)]

use std::path::Path;

use bzsl::classifier::{argmax_first, fit, FitOptions, SearchSpace, Variant};
use bzsl::cli::{cmd_eval, cmd_synth, cmd_tune, sweep, tune, DataSource, Grid, RunConfig, SweepParam, DEFAULT_HOLDOUT};
use bzsl::dataset::{load_bundle, save_bundle, validate_split, Dataset, SplitSpec};
use bzsl::eval::{harmonic_mean, topk_accuracy, EvalReport};
use bzsl::metaclass::{build_meta_classes, l2_rank, select_support, AttrNorm, Neighbor};
use bzsl::modelfile;
use bzsl::ppd::{
    meta_posterior, seen_form, seen_ppd, seen_ppd_diag, unseen_ppd, unseen_ppd_diag, CovForm, GlobalPrior, Hyperparams,
};
use bzsl::stats::{class_stats, pca_fit, ClassStats, Scatter, StudentT};
use bzsl::synth::{mc_ppd_oracle, sample_dataset, GenSpec, SyntheticData};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use crate::common;

pub struct Invariant {
    pub module: &'static str,
    pub name: &'static str,
    /// Randomized cases, or repetitions for the fixture-level checks.
    pub cases: u32,
    pub check: fn(u32) -> Result<(), String>,
}

pub const ALL: &[Invariant] = &[
    Invariant {
        module: "dataset",
        name: "bundle round trip is bit-exact",
        cases: 1000,
        check: bundle_round_trip,
    },
    Invariant {
        module: "dataset",
        name: "violations are unseen classes with training rows",
        cases: 1000,
        check: split_violations,
    },
    Invariant {
        module: "metaclass",
        name: "tie order never changes the support",
        cases: 1000,
        check: support_tie_order,
    },
    Invariant {
        module: "metaclass",
        name: "every class has exactly K supports",
        cases: 1000,
        check: support_size,
    },
    Invariant {
        module: "metaclass",
        name: "sub-gap query perturbation keeps the support",
        cases: 1000,
        check: support_perturbation,
    },
    Invariant {
        module: "stats",
        name: "class statistics ignore row order",
        cases: 1000,
        check: stats_row_order,
    },
    Invariant {
        module: "stats",
        name: "Student-t tends to the normal at v = 1e6",
        cases: 1000,
        check: t_normal_limit,
    },
    Invariant {
        module: "stats",
        name: "isotropic diagonal equals full",
        cases: 1000,
        check: isotropic_diagonal,
    },
    Invariant {
        module: "stats",
        name: "PCA keeps inner products in its subspace",
        cases: 1000,
        check: pca_inner_products,
    },
    Invariant {
        module: "ppd",
        name: "unseen density equals the empty seen class",
        cases: 1000,
        check: unseen_is_empty_class,
    },
    Invariant {
        module: "ppd",
        name: "kappa_tilde below kappa1 and kappa_bar",
        cases: 1000,
        check: kappa_tilde_bound,
    },
    Invariant {
        module: "ppd",
        name: "meta-mean weights are convex",
        cases: 1000,
        check: convex_weights,
    },
    Invariant {
        module: "ppd",
        name: "degrees of freedom positive",
        cases: 1000,
        check: positive_dof,
    },
    Invariant {
        module: "ppd",
        name: "scale matrices symmetric PD",
        cases: 1000,
        check: pd_scales,
    },
    Invariant {
        module: "ppd",
        name: "duplicate support raises kappa_bar",
        cases: 1000,
        check: duplicate_support,
    },
    Invariant {
        module: "ppd",
        name: "D = 1 constrained equals unconstrained",
        cases: 1000,
        check: one_dim_constrained,
    },
    Invariant {
        module: "ppd",
        name: "closed form matches Monte Carlo",
        cases: 4,
        check: closed_form_matches_mc,
    },
    Invariant {
        module: "classifier",
        name: "argmax invariant under monotone maps",
        cases: 1000,
        check: argmax_monotone,
    },
    Invariant {
        module: "classifier",
        name: "GZSL scores on the unseen pool equal ZSL scores",
        cases: 100,
        check: gzsl_zsl_scores,
    },
    Invariant {
        module: "classifier",
        name: "fitting is byte-deterministic",
        cases: 50,
        check: fit_determinism,
    },
    Invariant {
        module: "classifier",
        name: "unseen accuracy peaks at kappa1 = 1",
        cases: 1,
        check: kappa1_peak,
    },
    Invariant {
        module: "eval",
        name: "top-k non-decreasing in k",
        cases: 1000,
        check: topk_monotone,
    },
    Invariant {
        module: "eval",
        name: "harmonic mean bounds",
        cases: 1000,
        check: harmonic_bounds,
    },
    Invariant {
        module: "eval",
        name: "metrics ignore row order",
        cases: 1000,
        check: metric_row_order,
    },
    Invariant {
        module: "synth",
        name: "sample means converge to true means",
        cases: 1,
        check: mean_consistency,
    },
    Invariant {
        module: "synth",
        name: "Monte-Carlo estimate independent of seed",
        cases: 3,
        check: mc_seed_invariance,
    },
    Invariant {
        module: "synth",
        name: "class-mean dispersion scales as 1/kappa1",
        cases: 1,
        check: dispersion_scaling,
    },
    Invariant {
        module: "cli",
        name: "commands are deterministic",
        cases: 1,
        check: command_determinism,
    },
    Invariant {
        module: "cli",
        name: "tune winner reproduces its validation H",
        cases: 1,
        check: tune_reproduces,
    },
];

pub fn by_name(name: &str) -> &'static Invariant {
    ALL.iter().find(|i| i.name == name).expect("known invariant")
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn shuffle<T>(v: &mut [T], seed: u64) {
    let mut s = seed | 1;
    for i in (1..v.len()).rev() {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        v.swap(i, (s % (i as u64 + 1)) as usize);
    }
}

// dataset

fn dataset_strategy() -> impl Strategy<Value = (Dataset, SplitSpec)> {
    (1usize..6, 1usize..5, 2usize..6, 1usize..4)
        .prop_flat_map(|(n_per, d, c, a)| {
            let n = n_per * c;
            (
                prop::collection::vec(
                    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
                    n * d,
                ),
                prop::collection::vec(0usize..c, n),
                prop::collection::vec(0.5f32..2.0, c * a),
                Just((d, c, a)),
                1usize..c,
                any::<bool>(),
            )
        })
        .prop_map(|(features, labels, attributes, (d, c, a), n_seen, with_names)| {
            let names = with_names.then(|| (0..c).map(|i| format!("class {i}")).collect());
            let ds = Dataset::new(features, d, labels, attributes, a, names).unwrap();
            let mut split = SplitSpec::new((0..n_seen).collect(), (n_seen..c).collect());
            if n_seen > 1 {
                split = split.with_val_unseen(vec![0]);
            }
            (ds, split)
        })
}

pub fn bundle_round_trip(cases: u32) -> Result<(), String> {
    run(cases, dataset_strategy(), |(ds, split)| {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&ds, &split, dir.path()).unwrap();
        let (back, back_split) = load_bundle(dir.path()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.features()), bits(ds.features()));
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back_split, split);
        Ok(())
    })
}

pub fn split_violations(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(0usize..6, 1..60),
        1usize..5,
        prop::collection::vec(any::<bool>(), 60),
    );
    run(cases, strategy, |(labels, n_seen, test_mask)| {
        let n = labels.len();
        let ds = Dataset::new(
            vec![1.0; n],
            1,
            labels.clone(),
            (1..=6).map(|v| v as f32).collect(),
            1,
            None,
        )
        .unwrap();
        let test: Vec<usize> = (0..n).filter(|&r| test_mask[r]).collect();
        let split = SplitSpec::new((0..n_seen).collect(), (n_seen..6).collect()).with_test_index(test);
        let expected: Vec<usize> = (n_seen..6)
            .filter(|&c| (0..n).any(|r| labels[r] == c && !test_mask[r]))
            .collect();
        prop_assert_eq!(validate_split(&ds, &split).violations, expected);
        Ok(())
    })
}

// metaclass

fn tied_ranking() -> impl Strategy<Value = (Vec<Neighbor>, usize, u64)> {
    (prop::collection::vec(0u8..4, 2..12), any::<u64>(), any::<u64>()).prop_flat_map(|(levels, seed, seed2)| {
        let n = levels.len();
        let mut ranking: Vec<Neighbor> = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| Neighbor {
                class: i * 3 + 1,
                distance: f64::from(l),
            })
            .collect();
        shuffle(&mut ranking, seed);
        (Just(ranking), 1..=n, Just(seed2))
    })
}

pub fn support_tie_order(cases: u32) -> Result<(), String> {
    run(cases, tied_ranking(), |(ranking, k, seed)| {
        let a = select_support(&ranking, k).unwrap();
        let mut permuted = ranking.clone();
        shuffle(&mut permuted, seed);
        prop_assert_eq!(&a, &select_support(&permuted, k).unwrap());
        prop_assert_eq!(a.len(), k);
        Ok(())
    })
}

pub fn support_size(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(prop::collection::vec(0.1f32..3.0, 2), 4..10),
        1usize..3,
        1usize..8,
    );
    run(cases, strategy, |(attr, n_unseen, k_raw)| {
        let c = attr.len();
        let n_seen = c - n_unseen;
        let k = 1 + k_raw % (n_seen - 1);
        let ds = Dataset::new(vec![0.5; c], 1, (0..c).collect(), attr.concat(), 2, None).unwrap();
        let split = SplitSpec::new((0..n_seen).collect(), (n_seen..c).collect());
        let map = build_meta_classes(&ds, &split, k, AttrNorm::None).unwrap();
        prop_assert_eq!(map.entries.len(), c);
        for (&class, s) in &map.entries {
            prop_assert_eq!(s.support.len(), k);
            prop_assert!(!s.support.contains(&class));
            prop_assert!(s.support.iter().all(|&x| x < n_seen));
            prop_assert!(s.distances.windows(2).all(|w| w[0] <= w[1]));
        }
        Ok(())
    })
}

pub fn support_perturbation(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 9),
        1usize..5,
        prop::collection::vec(-1.0f64..1.0, 3),
    );
    run(cases, strategy, |(rows, k, dir)| {
        let cands: Vec<(usize, Vec<f64>)> = rows[1..].iter().cloned().enumerate().collect();
        let ranking = l2_rank(&rows[0], &cands, None).unwrap();
        let gap = ranking
            .windows(2)
            .map(|w| w[1].distance - w[0].distance)
            .filter(|&g| g > 0.0)
            .fold(f64::INFINITY, f64::min);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(gap.is_finite() && gap > 1e-9 && norm > 1e-6) {
            return Ok(());
        }
        let eps = 0.49 * gap;
        let moved: Vec<f64> = rows[0].iter().zip(&dir).map(|(q, d)| q + eps * d / norm).collect();
        let ids = |r: &[Neighbor]| {
            let mut v: Vec<usize> = select_support(r, k).unwrap().iter().map(|n| n.class).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(ids(&ranking), ids(&l2_rank(&moved, &cands, None).unwrap()));
        Ok(())
    })
}

// stats

pub fn stats_row_order(cases: u32) -> Result<(), String> {
    run(cases, (common::rows(9, 3), any::<u64>()), |(rows, seed)| {
        let mut idx: Vec<usize> = (0..9).collect();
        shuffle(&mut idx, seed);
        let a = class_stats(&rows).unwrap();
        let b = class_stats(&rows.select_rows(idx.iter())).unwrap();
        let full = |s: &Scatter| match s {
            Scatter::Full(m) => m.clone(),
            Scatter::Diagonal(v) => DMatrix::from_diagonal(v),
        };
        prop_assert!((a.mean - b.mean).amax() < 1e-12);
        prop_assert!((full(&a.scatter) - full(&b.scatter)).amax() < 1e-10);
        prop_assert_eq!(a.count, b.count);
        Ok(())
    })
}

fn normal_logpdf(x: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let diff = x - mu;
    let q = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[0];
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * q
}

pub fn t_normal_limit(cases: u32) -> Result<(), String> {
    let strategy = (
        common::vector(3, -2.0, 2.0),
        common::spd(3, 0.5),
        common::vector(3, -1.0, 1.0),
    );
    run(cases, strategy, |(loc, scale, delta)| {
        // Mahalanobis distance below ~6 keeps the O(q^2 / v) gap small
        let x = &loc + delta;
        let t = StudentT::full(loc.clone(), scale.clone(), 1e6)
            .unwrap()
            .logpdf(&x)
            .unwrap();
        let n = normal_logpdf(&x, &loc, &scale);
        prop_assert!((t - n).abs() < 1e-4, "{} vs {}", t, n);
        Ok(())
    })
}

pub fn isotropic_diagonal(cases: u32) -> Result<(), String> {
    // the diagonal form is a product of axis densities, so it meets the
    // multivariate full form only at D = 1; above that, each axis must
    // match a one-dimensional full evaluation
    let strategy = (
        common::vector(3, -2.0, 2.0),
        0.05f64..5.0,
        common::vector(3, -6.0, 6.0),
        0.5f64..40.0,
    );
    run(cases, strategy, |(loc, var, x, dof)| {
        let one = |i: usize| {
            let l = DVector::from_element(1, loc[i]);
            let p = DVector::from_element(1, x[i]);
            let d = StudentT::diagonal(l.clone(), DVector::from_element(1, var), dof)
                .unwrap()
                .logpdf(&p)
                .unwrap();
            let f = StudentT::full(l, DMatrix::from_element(1, 1, var), dof)
                .unwrap()
                .logpdf(&p)
                .unwrap();
            (d, f)
        };
        let (d0, f0) = one(0);
        prop_assert!((d0 - f0).abs() < 1e-10);
        let axes: f64 = (0..3).map(|i| one(i).1).sum();
        let diag = StudentT::diagonal(loc.clone(), DVector::from_element(3, var), dof)
            .unwrap()
            .logpdf(&x)
            .unwrap();
        prop_assert!((diag - axes).abs() < 1e-10);
        Ok(())
    })
}

pub fn pca_inner_products(cases: u32) -> Result<(), String> {
    let strategy = (
        common::rows(12, 5),
        1usize..5,
        common::vector(4, -2.0, 2.0),
        common::vector(4, -2.0, 2.0),
    );
    run(cases, strategy, |(rows, d, a, b)| {
        let Ok(model) = pca_fit(&rows, d) else {
            return Ok(());
        };
        let gram = model.projection.transpose() * &model.projection;
        prop_assert!((gram - DMatrix::<f64>::identity(d, d)).amax() < 1e-8);
        let u = &model.projection * a.rows(0, d);
        let v = &model.projection * b.rows(0, d);
        let (pu, pv) = (model.projection.tr_mul(&u), model.projection.tr_mul(&v));
        prop_assert!((pu.dot(&pv) - u.dot(&v)).abs() < 1e-9);
        Ok(())
    })
}

// ppd

const D: usize = 3;

fn hp_strategy() -> impl Strategy<Value = Hyperparams> {
    (0.01f64..10.0, 0.01f64..50.0, 0.0f64..40.0, 1usize..5).prop_map(|(kappa0, kappa1, extra, k)| Hyperparams {
        kappa0,
        kappa1,
        m: D as f64 + 2.0 + extra,
        s: 1.0,
        k,
        a0: None,
        b0: None,
    })
}

fn ppd_case() -> impl Strategy<Value = (Vec<ClassStats>, ClassStats, GlobalPrior, Hyperparams)> {
    (
        prop::collection::vec(common::class_stats(D, 30), 1..5),
        common::class_stats(D, 30),
        common::full_prior(D),
        hp_strategy(),
    )
}

pub fn unseen_is_empty_class(cases: u32) -> Result<(), String> {
    run(
        cases,
        (ppd_case(), common::vector(D, -3.0, 3.0)),
        |((sup, _, prior, hp), anchor)| {
            let sup: Vec<&ClassStats> = sup.iter().collect();
            let phantom = ClassStats {
                mean: anchor,
                scatter: Scatter::Full(DMatrix::zeros(D, D)),
                count: 0,
            };
            let mp = meta_posterior(&sup, &prior, &hp, Some(&phantom)).unwrap();
            let mp_none = meta_posterior(&sup, &prior, &hp, None).unwrap();
            let a = unseen_ppd(9, &mp_none, &prior, &hp).unwrap();
            let b = seen_form(9, &phantom, &mp, &prior, &hp, CovForm::Full).unwrap();
            prop_assert_eq!(a.student_t, b.student_t);
            Ok(())
        },
    )
}

pub fn kappa_tilde_bound(cases: u32) -> Result<(), String> {
    run(cases, ppd_case(), |(sup, _, prior, hp)| {
        let sup: Vec<&ClassStats> = sup.iter().collect();
        let mp = meta_posterior(&sup, &prior, &hp, None).unwrap();
        prop_assert!(mp.kappa_tilde < hp.kappa1.min(mp.kappa_bar));
        Ok(())
    })
}

pub fn convex_weights(cases: u32) -> Result<(), String> {
    run(cases, ppd_case(), |(sup, _, prior, hp)| {
        let refs: Vec<&ClassStats> = sup.iter().collect();
        let mp = meta_posterior(&refs, &prior, &hp, None).unwrap();
        prop_assert_eq!(mp.weights.len(), sup.len() + 1);
        prop_assert!(mp.weights.iter().all(|&w| w > 0.0));
        prop_assert!((mp.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut combo = &prior.mu0 * mp.weights[sup.len()];
        for (st, w) in sup.iter().zip(&mp.weights) {
            combo += &st.mean * *w;
        }
        prop_assert!((combo - &mp.mu_bar).amax() < 1e-10);
        Ok(())
    })
}

fn both_ppds(sup: &[ClassStats], cur: &ClassStats, prior: &GlobalPrior, hp: &Hyperparams) -> (StudentT, StudentT) {
    let sup: Vec<&ClassStats> = sup.iter().collect();
    let mp = meta_posterior(&sup, prior, hp, Some(cur)).unwrap();
    let seen = seen_ppd(0, cur, &mp, prior, hp).unwrap();
    let mp0 = meta_posterior(&sup, prior, hp, None).unwrap();
    let unseen = unseen_ppd(1, &mp0, prior, hp).unwrap();
    (seen.student_t, unseen.student_t)
}

pub fn positive_dof(cases: u32) -> Result<(), String> {
    run(cases, ppd_case(), |(sup, cur, prior, hp)| {
        let (seen, unseen) = both_ppds(&sup, &cur, &prior, &hp);
        let dof_sum: f64 = sup.iter().map(|s| s.count as f64 - 1.0).sum();
        prop_assert_eq!(seen.dof(), cur.count as f64 + dof_sum + hp.m - D as f64 + 1.0);
        prop_assert_eq!(unseen.dof(), dof_sum + hp.m - D as f64 + 1.0);
        prop_assert!(seen.dof() > 0.0 && unseen.dof() > 0.0);
        Ok(())
    })
}

pub fn pd_scales(cases: u32) -> Result<(), String> {
    run(cases, ppd_case(), |(sup, cur, prior, hp)| {
        let (seen, unseen) = both_ppds(&sup, &cur, &prior, &hp);
        for t in [seen, unseen] {
            let s = t.scale_matrix();
            prop_assert!((&s - s.transpose()).amax() <= 1e-12 * s.amax());
            prop_assert!(s.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        }
        Ok(())
    })
}

pub fn duplicate_support(cases: u32) -> Result<(), String> {
    run(
        cases,
        (ppd_case(), any::<prop::sample::Index>()),
        |((sup, _, prior, hp), pick)| {
            let before = meta_posterior(&sup.iter().collect::<Vec<_>>(), &prior, &hp, None).unwrap();
            let mut more = sup.clone();
            more.push(sup[pick.index(sup.len())].clone());
            let after = meta_posterior(&more.iter().collect::<Vec<_>>(), &prior, &hp, None).unwrap();
            prop_assert!(after.kappa_bar > before.kappa_bar);
            Ok(())
        },
    )
}

fn diag_stats(st: &ClassStats) -> ClassStats {
    ClassStats {
        mean: st.mean.clone(),
        scatter: Scatter::Diagonal(st.scatter.diagonal()),
        count: st.count,
    }
}

pub fn one_dim_constrained(cases: u32) -> Result<(), String> {
    let strategy = (
        (
            prop::collection::vec(common::class_stats(1, 30), 1..5),
            common::class_stats(1, 30),
        ),
        (-2.0f64..2.0, 0.5f64..20.0, 0.05f64..5.0),
        (0.01f64..10.0, 0.01f64..50.0, -6.0f64..6.0),
    );
    run(cases, strategy, |((sup, cur), (mu0, a0, b0), (kappa0, kappa1, x))| {
        // m = 2 a0 and Sigma0 = 2 b0 make the two priors the same distribution
        let full_hp = Hyperparams {
            kappa0,
            kappa1,
            m: 2.0 * a0,
            s: 1.0,
            k: sup.len(),
            a0: None,
            b0: None,
        };
        let diag_hp = Hyperparams {
            a0: Some(a0),
            b0: Some(b0),
            ..full_hp
        };
        let mu0 = DVector::from_element(1, mu0);
        let full_prior = GlobalPrior {
            mu0: mu0.clone(),
            sigma0: Scatter::Full(DMatrix::from_element(1, 1, 2.0 * b0)),
        };
        let diag_prior = GlobalPrior {
            mu0,
            sigma0: Scatter::Diagonal(DVector::from_element(1, 2.0 * b0)),
        };
        let diag_sup: Vec<ClassStats> = sup.iter().map(diag_stats).collect();
        let diag_cur = diag_stats(&cur);
        let (sup, diag_sup): (Vec<&ClassStats>, Vec<&ClassStats>) = (sup.iter().collect(), diag_sup.iter().collect());
        let p = DVector::from_element(1, x);

        let mp_f = meta_posterior(&sup, &full_prior, &full_hp, Some(&cur)).unwrap();
        let mp_d = meta_posterior(&diag_sup, &diag_prior, &diag_hp, Some(&diag_cur)).unwrap();
        let f = seen_ppd(0, &cur, &mp_f, &full_prior, &full_hp).unwrap().student_t;
        let d = seen_ppd_diag(0, &diag_cur, &mp_d, &diag_prior, &diag_hp)
            .unwrap()
            .student_t;
        prop_assert!((f.location()[0] - d.location()[0]).abs() < 1e-10);
        prop_assert!((f.logpdf(&p).unwrap() - d.logpdf(&p).unwrap()).abs() < 1e-10);

        let mp_f = meta_posterior(&sup, &full_prior, &full_hp, None).unwrap();
        let mp_d = meta_posterior(&diag_sup, &diag_prior, &diag_hp, None).unwrap();
        let f = unseen_ppd(1, &mp_f, &full_prior, &full_hp).unwrap().student_t;
        let d = unseen_ppd_diag(1, &mp_d, &diag_prior, &diag_hp).unwrap().student_t;
        prop_assert!((f.location()[0] - d.location()[0]).abs() < 1e-10);
        prop_assert!((f.logpdf(&p).unwrap() - d.logpdf(&p).unwrap()).abs() < 1e-10);
        Ok(())
    })
}

/// Closed form against the Monte-Carlo marginal at both query points of
/// `fixture`. Returns `(closed form, estimate)` for the seen then unseen case.
pub fn mc_comparison(fixture: u64, draws: usize) -> [(f64, bzsl::synth::McEstimate); 2] {
    let f = common::mc_fixture(fixture);
    let sup = f.support_refs();
    let (cf_seen, cf_unseen) = f.closed_form();
    let seen = mc_ppd_oracle(&f.x_seen, &sup, Some(&f.current), &f.prior, &f.hp, draws, fixture).unwrap();
    let unseen = mc_ppd_oracle(&f.x_unseen, &sup, None, &f.prior, &f.hp, draws, fixture).unwrap();
    [(cf_seen, seen), (cf_unseen, unseen)]
}

pub fn closed_form_matches_mc(cases: u32) -> Result<(), String> {
    for fixture in 0..u64::from(cases) {
        for (cf, mc) in mc_comparison(fixture, 200_000) {
            let gap = (cf - mc.log_density).abs();
            ensure(gap <= 3.0 * mc.std_error && gap <= 0.01 * cf.abs(), || {
                format!("fixture {fixture}: {cf} vs {mc:?}")
            })?;
        }
    }
    Ok(())
}

// classifier

pub fn argmax_monotone(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(-1000i32..1000, 1..30),
        -50.0f64..50.0,
        0.5f64..4.0,
    );
    run(cases, strategy, |(ints, shift, scale)| {
        // integer-valued scores keep distinct values distinct under every map below
        let scores: Vec<f64> = ints.iter().map(|&v| f64::from(v)).collect();
        let base = argmax_first(scores.iter().copied());
        prop_assert_eq!(base, argmax_first(scores.iter().map(|s| scale * s + shift)));
        prop_assert_eq!(base, argmax_first(scores.iter().map(|s| s.cbrt())));
        prop_assert_eq!(base, argmax_first(scores.iter().map(|s| (s / 1000.0).exp())));
        prop_assert_eq!(base, argmax_first(scores.iter().map(|s| (s / 1000.0).atan())));
        Ok(())
    })
}

fn blob_case() -> impl Strategy<Value = (Dataset, SplitSpec)> {
    (4usize..7, 2usize..4, 2.0f64..10.0, any::<u64>(), any::<u64>()).prop_map(|(classes, d, gap, seed, pick)| {
        let ds = common::blobs(classes, 12, d, gap, seed);
        let mut ids: Vec<usize> = (0..classes).collect();
        shuffle(&mut ids, pick);
        let (unseen, seen) = ids.split_at(2);
        let (mut seen, mut unseen) = (seen.to_vec(), unseen.to_vec());
        seen.sort_unstable();
        unseen.sort_unstable();
        (ds, SplitSpec::new(seen, unseen))
    })
}

fn blob_hp() -> Hyperparams {
    Hyperparams {
        kappa0: 0.1,
        kappa1: 5.0,
        m: 8.0,
        s: 1.0,
        k: 1,
        a0: None,
        b0: None,
    }
}

pub fn gzsl_zsl_scores(cases: u32) -> Result<(), String> {
    run(cases, blob_case(), |(ds, splits)| {
        let model = fit(&ds, &splits, &blob_hp(), &FitOptions::new(Variant::Unconstrained)).unwrap();
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        let g = model.predict_rows(&ds, &rows, SearchSpace::Gzsl).unwrap();
        let z = model.predict_rows(&ds, &rows, SearchSpace::ZslUnseenOnly).unwrap();
        for (a, b) in g.iter().zip(&z) {
            let restricted: Vec<(usize, f64)> = a
                .log_scores
                .iter()
                .copied()
                .filter(|(c, _)| splits.unseen.contains(c))
                .collect();
            prop_assert_eq!(&restricted, &b.log_scores);
            prop_assert!(splits.unseen.contains(&b.class_id));
        }
        Ok(())
    })
}

pub fn fit_determinism(cases: u32) -> Result<(), String> {
    run(cases, (blob_case(), any::<bool>()), |((ds, splits), constrained)| {
        let variant = if constrained {
            Variant::Constrained
        } else {
            Variant::Unconstrained
        };
        let hp = Hyperparams {
            a0: constrained.then_some(4.0),
            ..blob_hp()
        };
        let opts = FitOptions::new(variant);
        let a = modelfile::to_bytes(&fit(&ds, &splits, &hp, &opts).unwrap()).unwrap();
        let b = modelfile::to_bytes(&fit(&ds, &splits, &hp, &opts).unwrap()).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

/// Seed-0 standard synthetic fixture.
pub fn standard_fixture() -> SyntheticData {
    sample_dataset(&GenSpec::standard(0)).unwrap()
}

/// Winner of the default grid under the validation protocol.
pub fn tuned(data: &SyntheticData) -> Hyperparams {
    let opts = FitOptions::new(Variant::Unconstrained);
    tune(&data.dataset, &data.splits, &Grid::default(), &opts, DEFAULT_HOLDOUT)
        .unwrap()
        .best
}

pub const KAPPA_GRID: [f64; 3] = [1e-3, 1.0, 1e3];

/// Unseen accuracy `ts` of the tuned model at each value of `param`.
pub fn sensitivity(data: &SyntheticData, base: &Hyperparams, param: SweepParam) -> Vec<f64> {
    let opts = FitOptions::new(Variant::Unconstrained);
    sweep(&data.dataset, &data.splits, base, param, &KAPPA_GRID, &opts)
        .unwrap()
        .iter()
        .map(|r| r.ts)
        .collect()
}

pub fn kappa1_peak(_: u32) -> Result<(), String> {
    let data = standard_fixture();
    let ts = sensitivity(&data, &tuned(&data), SweepParam::Kappa1);
    ensure(ts[1] > ts[0] && ts[1] > ts[2], || format!("unseen accuracy {ts:?}"))
}

// eval

fn scored_rows() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..8, n),
            prop::collection::vec(0usize..8, n),
            prop::collection::vec(prop::collection::vec(-10i32..10, 8), n),
        )
            .prop_map(|(t, p, s)| {
                let scores = s.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
                (t, p, scores)
            })
    })
}

pub fn topk_monotone(cases: u32) -> Result<(), String> {
    run(cases, (scored_rows(), 1u8..=255), |((truths, _, scores), mask)| {
        let pool: Vec<usize> = (0..8).filter(|c| mask & (1 << c) != 0).collect();
        let candidates: Vec<usize> = (0..8).collect();
        let ks: Vec<usize> = (1..=8).collect();
        let t = topk_accuracy(&scores, &candidates, &truths, &ks, &pool).unwrap();
        for avg in [&t.macro_avg, &t.micro_avg] {
            let v: Vec<f64> = ks.iter().map(|k| avg[k]).collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        }
        if truths.iter().any(|c| pool.contains(c)) {
            prop_assert_eq!(t.macro_avg[&8], 1.0);
        }
        Ok(())
    })
}

pub fn harmonic_bounds(cases: u32) -> Result<(), String> {
    run(cases, (0.0f64..=1.0, 0.0f64..=1.0), |(tr, ts)| {
        let h = harmonic_mean(tr, ts);
        let (lo, hi) = (tr.min(ts), tr.max(ts));
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!(h <= 2.0 * lo + 1e-15);
        if hi > 0.0 {
            prop_assert!(h <= lo * 2.0 * hi / (lo + hi) + 1e-15);
        }
        Ok(())
    })
}

pub fn metric_row_order(cases: u32) -> Result<(), String> {
    run(
        cases,
        (scored_rows(), any::<u64>()),
        |((truths, preds, scores), seed)| {
            let mut perm: Vec<usize> = (0..truths.len()).collect();
            shuffle(&mut perm, seed);
            let t2: Vec<usize> = perm.iter().map(|&i| truths[i]).collect();
            let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
            let s2: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
            let (seen, unseen) = (vec![0, 1, 2, 3, 4], vec![5, 6, 7]);
            let cands: Vec<usize> = (0..8).collect();
            let ks = [1, 3, 5];
            let a =
                EvalReport::from_predictions(&preds, &truths, &seen, &unseen, Some((&scores, &cands, &ks))).unwrap();
            let b = EvalReport::from_predictions(&p2, &t2, &seen, &unseen, Some((&s2, &cands, &ks))).unwrap();
            prop_assert_eq!(&a.per_class_acc, &b.per_class_acc);
            prop_assert!((a.ts - b.ts).abs() < 1e-15 && (a.tr - b.tr).abs() < 1e-15 && (a.h - b.h).abs() < 1e-15);
            for k in ks {
                prop_assert!((a.topk[&k] - b.topk[&k]).abs() < 1e-15);
            }
            prop_assert!([a.ts, a.tr, a.h].iter().all(|v| (0.0..=1.0).contains(v)));
            Ok(())
        },
    )
}

// synth

fn synth_spec(seed: u64) -> GenSpec {
    GenSpec {
        n_meta: 4,
        classes_per_meta: 3,
        samples_per_class: 20,
        val_per_meta: 0,
        ..GenSpec::standard(seed)
    }
}

pub fn mean_consistency(_: u32) -> Result<(), String> {
    let mut errors = Vec::new();
    for n in [10, 100, 1000] {
        let data = sample_dataset(&GenSpec {
            samples_per_class: n,
            ..synth_spec(3)
        })
        .map_err(|e| e.to_string())?;
        let ds = &data.dataset;
        let (mut outside, mut total, mut err) = (0usize, 0usize, 0.0);
        for (c, mu) in data.truth.class_means.iter().enumerate() {
            let cov = &data.truth.meta_covs[data.truth.meta_of_class[c]];
            let rows: Vec<usize> = (0..ds.n_rows()).filter(|&r| ds.labels()[r] == c).collect();
            let st = class_stats(&ds.rows_matrix(&rows)).unwrap();
            for k in 0..mu.len() {
                let z = (st.mean[k] - mu[k]).abs() / (cov[(k, k)] / n as f64).sqrt();
                outside += (z > 3.0) as usize;
                total += 1;
                err += (st.mean[k] - mu[k]).abs();
            }
        }
        // a standard normal leaves [-3, 3] with probability 0.27%
        ensure(outside as f64 <= 0.02 * total as f64, || {
            format!("n = {n}: {outside} of {total} beyond 3 SE")
        })?;
        errors.push(err / total as f64);
    }
    ensure(errors[0] > errors[1] && errors[1] > errors[2], || {
        format!("errors not shrinking: {errors:?}")
    })
}

pub fn mc_seed_invariance(cases: u32) -> Result<(), String> {
    for fixture in 0..u64::from(cases) {
        let f = common::mc_fixture(fixture);
        let sup = f.support_refs();
        let est = |seed| mc_ppd_oracle(&f.x_seen, &sup, Some(&f.current), &f.prior, &f.hp, 200_000, seed).unwrap();
        let (a, b) = (est(1), est(2));
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        ensure((a.log_density - b.log_density).abs() < 4.0 * se, || {
            format!("fixture {fixture}: {a:?} vs {b:?}")
        })?;
    }
    Ok(())
}

pub fn dispersion_scaling(_: u32) -> Result<(), String> {
    let dispersion = |kappa1: f64, seed: u64| -> f64 {
        let data = sample_dataset(&GenSpec {
            n_meta: 40,
            classes_per_meta: 6,
            samples_per_class: 1,
            kappa1,
            seed,
            ..synth_spec(0)
        })
        .unwrap();
        let t = &data.truth;
        (0..data.spec.n_meta)
            .map(|j| {
                let members: Vec<&DVector<f64>> = (0..t.class_means.len())
                    .filter(|&c| t.meta_of_class[c] == j)
                    .map(|c| &t.class_means[c])
                    .collect();
                let centre =
                    members.iter().fold(DVector::zeros(data.spec.dim), |acc, m| acc + *m) / members.len() as f64;
                members.iter().map(|m| (*m - &centre).norm_squared()).sum::<f64>() / t.meta_covs[j].trace()
            })
            .sum()
    };
    let d = [dispersion(1.0, 11), dispersion(10.0, 12), dispersion(100.0, 13)];
    for (i, ratio) in [d[0] / d[1], d[1] / d[2]].into_iter().enumerate() {
        ensure((ratio / 10.0 - 1.0).abs() <= 0.3, || format!("ratio {i}: {ratio}"))?;
    }
    Ok(())
}

// cli

fn synth_bundle(seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: Some(dir.path().to_path_buf()),
        ..RunConfig::default()
    };
    cmd_synth(&cfg, &GenSpec::standard(seed)).unwrap();
    dir
}

fn bundle_config(bundle: &Path, out: Option<&Path>) -> RunConfig {
    RunConfig {
        data: Some(DataSource::Bundle(bundle.to_path_buf())),
        out: out.map(Path::to_path_buf),
        ..RunConfig::default()
    }
}

pub fn command_determinism(_: u32) -> Result<(), String> {
    let data = synth_bundle(11);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = bundle_config(data.path(), Some(d.path()));
        cmd_eval(&cfg, false).map_err(|e| e.to_string())?;
        cmd_tune(
            &cfg,
            &Grid {
                k: vec![1, 2],
                ..Grid::default()
            },
        )
        .map_err(|e| e.to_string())?;
    }
    for f in ["report.json", "predictions.csv", "leaderboard.csv", "best.json"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(())
}

pub fn tune_reproduces(_: u32) -> Result<(), String> {
    let data = synth_bundle(0);
    let cfg = bundle_config(data.path(), None);
    let result = cmd_tune(&cfg, &Grid::default()).map_err(|e| e.to_string())?;
    let rerun = RunConfig {
        hyperparams: result.best,
        ..cfg
    };
    let report = cmd_eval(&rerun, true).map_err(|e| e.to_string())?;
    ensure(report.h == result.best_row.h, || {
        format!("{} vs {}", report.h, result.best_row.h)
    })
}
