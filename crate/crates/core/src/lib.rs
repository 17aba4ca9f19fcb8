//! Bayesian zero-shot classification.
//!
//! Every class is modelled by a Gaussian whose mean and covariance carry a
//! two-layer conjugate prior. Classes are grouped into local meta-classes
//! through attribute similarity, and each class is scored by its posterior
//! predictive Student-t density. Unseen classes borrow all their statistics
//! from the seen classes of their meta-class.
//!
//! ```no_run
//! use bzsl::{classifier, dataset, ppd::Hyperparams};
//!
//! let (data, splits) = dataset::load_bundle("bundle/").unwrap();
//! let opts = classifier::FitOptions::new(classifier::Variant::Unconstrained);
//! let model = classifier::fit(&data, &splits, &Hyperparams::default(), &opts).unwrap();
//! let rows = splits.test_rows(&data);
//! let preds = model.predict_rows(&data, &rows, classifier::SearchSpace::Gzsl).unwrap();
//! # let _ = preds;
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metaclass;
pub mod modelfile;
pub mod ppd;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
