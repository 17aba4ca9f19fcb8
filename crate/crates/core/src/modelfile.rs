//! Versioned binary model file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "BZSLM1\0\0"
//! variant      u8       0 unconstrained, 1 constrained
//! kappa0 kappa1 m s     f64 x 4
//! K            u64
//! a0 b0        f64 x 2  (NaN when unset)
//! input_dim    u64
//! dim          u64
//! has_pca      u8
//!   mean         f64 x input_dim
//!   projection   f64 x input_dim*dim  (column-major)
//!   variances    f64 x dim
//! n_seen       u64, ids u64 x n_seen
//! n_unseen     u64, ids u64 x n_unseen
//! n_records    u64
//! record:
//!   class_id   u64
//!   seen       u8
//!   form       u8       0 full, 1 diagonal
//!   dof        f64
//!   location   f64 x dim
//!   scale      f64 x dim*(dim+1)/2  lower Cholesky factor, row-major
//!              or f64 x dim         diagonal
//!   n_support  u64, ids u64 x n_support, distances f64 x n_support
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::classifier::{ClassDensity, Model, Variant};
use crate::error::{Error, Result};
use crate::metaclass::{MetaClassMap, Support};
use crate::ppd::{ClassPpd, Hyperparams};
use crate::stats::{PcaModel, StudentT, TScale};

pub const MODEL_MAGIC: &[u8; 8] = b"BZSLM1\0\0";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn ids(&mut self, ids: &[usize]) {
        self.u64(ids.len() as u64);
        for &i in ids {
            self.u64(i as u64);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: "<model>".into(),
            offset: self.pos as u64,
            message: msg.into(),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format {
            path: "<model>".into(),
            offset: at as u64,
            message: format!("value {v} too large"),
        })
    }
    /// A count of items of `item_size` bytes each, checked against the
    /// remaining input before anything is allocated.
    fn count(&mut self, item_size: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item_size) > self.buf.len() - self.pos {
            return Err(self.err("count exceeds file size"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(self.err("unexpected end of file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
}

fn opt_f64(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn nan_none(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

/// Serializes a model. Only posterior-predictive models can be stored; the
/// V1 ablation has no such parameters.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let variant = match model.variant {
        Variant::Unconstrained => 0u8,
        Variant::Constrained => 1,
        Variant::AblationV1 => return Err(Error::invalid("the V1 ablation model cannot be saved")),
    };
    let hp = &model.hyperparams;
    let dim = model.dim();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u8(variant);
    for v in [hp.kappa0, hp.kappa1, hp.m, hp.s] {
        w.f64(v);
    }
    w.u64(hp.k as u64);
    w.f64(opt_f64(hp.a0));
    w.f64(opt_f64(hp.b0));
    w.u64(model.input_dim as u64);
    w.u64(dim as u64);
    match &model.pca {
        Some(p) => {
            w.u8(1);
            p.mean.iter().for_each(|&v| w.f64(v));
            p.projection.iter().for_each(|&v| w.f64(v));
            p.variances.iter().for_each(|&v| w.f64(v));
        }
        None => w.u8(0),
    }
    w.ids(&model.seen);
    w.ids(&model.unseen);
    w.u64(model.densities.len() as u64);
    for d in &model.densities {
        let ClassDensity::Ppd(p) = d else {
            return Err(Error::invalid("model holds a non-predictive density"));
        };
        let t = &p.student_t;
        w.u64(p.class_id as u64);
        w.u8(p.seen as u8);
        w.u8(t.is_diagonal() as u8);
        w.f64(t.dof());
        t.location().iter().for_each(|&v| w.f64(v));
        match t.scale() {
            TScale::Full { chol } => {
                for i in 0..dim {
                    for j in 0..=i {
                        w.f64(chol[(i, j)]);
                    }
                }
            }
            TScale::Diagonal(diag) => diag.iter().for_each(|&v| w.f64(v)),
        }
        let (ids, dists) = model
            .meta_map
            .entries
            .get(&p.class_id)
            .map(|s| (s.support.clone(), s.distances.clone()))
            .unwrap_or_default();
        w.ids(&ids);
        dists.iter().for_each(|&v| w.f64(v));
    }
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| r.err("not a model file"))? != MODEL_MAGIC {
        return Err(Error::Format {
            path: "<model>".into(),
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let variant = match r.u8()? {
        0 => Variant::Unconstrained,
        1 => Variant::Constrained,
        v => return Err(r.err(&format!("unknown variant tag {v}"))),
    };
    let (kappa0, kappa1, m, s) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let k = r.usize()?;
    let (a0, b0) = (nan_none(r.f64()?), nan_none(r.f64()?));
    let hyperparams = Hyperparams {
        kappa0,
        kappa1,
        m,
        s,
        k,
        a0,
        b0,
    };
    let input_dim = r.usize()?;
    let dim = r.usize()?;
    if dim == 0 || dim > input_dim {
        return Err(r.err("invalid dimensions"));
    }
    let pca = match r.u8()? {
        0 => {
            if dim != input_dim {
                return Err(r.err("dimension differs from input without a projection"));
            }
            None
        }
        1 => {
            let mean = DVector::from_vec(r.f64s(input_dim)?);
            let projection = DMatrix::from_vec(input_dim, dim, r.f64s(input_dim.saturating_mul(dim))?);
            let variances = DVector::from_vec(r.f64s(dim)?);
            Some(PcaModel {
                mean,
                projection,
                variances,
            })
        }
        v => return Err(r.err(&format!("bad projection flag {v}"))),
    };
    let seen = r.ids()?;
    let unseen = r.ids()?;
    let n_records = r.count(8)?;
    let mut densities = Vec::with_capacity(n_records);
    let mut entries = BTreeMap::new();
    for _ in 0..n_records {
        let class_id = r.usize()?;
        let is_seen = r.u8()? != 0;
        let diagonal = r.u8()? != 0;
        let dof = r.f64()?;
        let location = DVector::from_vec(r.f64s(dim)?);
        let student_t = if diagonal {
            StudentT::diagonal(location, DVector::from_vec(r.f64s(dim)?), dof)?
        } else {
            let mut chol = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..=i {
                    chol[(i, j)] = r.f64()?;
                }
            }
            StudentT::from_cholesky(location, chol, dof)?
        };
        let support = r.ids()?;
        let distances = r.f64s(support.len())?;
        if !support.is_empty() {
            entries.insert(class_id, Support { support, distances });
        }
        densities.push(ClassDensity::Ppd(ClassPpd {
            class_id,
            student_t,
            seen: is_seen,
        }));
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Model {
        variant,
        hyperparams,
        pca,
        densities,
        meta_map: MetaClassMap { k, entries },
        seen,
        unseen,
        input_dim,
    })
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Format { offset, message, .. } => Error::format(path, offset, message),
        other => other,
    })
}
