//! The two-scale graphical model: hyperparameters, the per-sequence s-vector
//! table, and the Gaussian densities and divergences that make up its bound.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{Array, Var};
use crate::error::{Error, Result};
use crate::recnet::{CellKind, NetShape, Networks};

/// Log-variances produced by any head are clamped to `[-8, 8]`.
pub const LOGVAR_CLAMP: f64 = 8.0;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub z1_dim: usize,
    pub z2_dim: usize,
    pub frame_dim: usize,
    pub seg_len: usize,
    /// Prior variance of z₁.
    pub var_z1: f64,
    /// Variance of z₂ around its s-vector.
    pub var_z2: f64,
    /// Prior variance of the s-vector μ₂.
    pub var_mu2: f64,
    /// Fixed posterior variance of μ₂. Only shifts reported bound constants.
    pub var_mu2_post: f64,
    /// Weight of the sequence-discrimination term.
    pub alpha: f64,
    pub cell: CellKind,
    pub hidden: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            z1_dim: 32,
            z2_dim: 32,
            frame_dim: 80,
            seg_len: 20,
            var_z1: 1.0,
            var_z2: 0.25,
            var_mu2: 1.0,
            var_mu2_post: 1e-3,
            alpha: 10.0,
            cell: CellKind::Lstm,
            hidden: 256,
        }
    }
}

impl HyperParams {
    /// Defaults for a cell kind; the feed-forward variant uses 512 hidden units.
    pub fn for_cell(cell: CellKind) -> Self {
        HyperParams { cell, hidden: if cell == CellKind::Fc { 512 } else { 256 }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("z1_dim", self.z1_dim),
            ("z2_dim", self.z2_dim),
            ("frame_dim", self.frame_dim),
            ("seg_len", self.seg_len),
            ("hidden", self.hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let vars = [
            ("var_z1", self.var_z1),
            ("var_z2", self.var_z2),
            ("var_mu2", self.var_mu2),
            ("var_mu2_post", self.var_mu2_post),
        ];
        for (name, v) in vars {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive finite variance, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            kind: self.cell,
            frame_dim: self.frame_dim,
            seg_len: self.seg_len,
            z1_dim: self.z1_dim,
            z2_dim: self.z2_dim,
            hidden: self.hidden,
        }
    }
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Self {
        assert_eq!(mean.len(), logvar.len(), "mean/logvar length mismatch");
        GaussianDiag { mean, logvar }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianDiag::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-training-sequence posterior means of μ₂, looked up by sequence id.
#[derive(Debug, Clone, PartialEq)]
pub struct SVectorTable {
    rows: Array,
    index: BTreeMap<String, usize>,
    ids: Vec<String>,
}

impl SVectorTable {
    /// Zero-initialized table, one row per id in the given order.
    pub fn zeros(ids: &[String], dim: usize) -> Result<Self> {
        Self::from_rows(ids.to_vec(), Array::zeros(&[ids.len(), dim]))
    }

    pub fn from_rows(ids: Vec<String>, rows: Array) -> Result<Self> {
        if rows.rank() != 2 || rows.shape()[0] != ids.len() {
            return Err(Error::Shape(format!("table of shape {:?} for {} ids", rows.shape(), ids.len())));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sequence id `{id}`")));
            }
        }
        Ok(SVectorTable { rows, index, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownSequence(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        Ok(self.rows.row(self.row_of(id)?))
    }

    pub fn rows(&self) -> &Array {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Array {
        &mut self.rows
    }
}

/// Networks, s-vector table and hyperparameters.
#[derive(Debug, Clone)]
pub struct FhvaeModel {
    pub hp: HyperParams,
    pub nets: Networks,
    pub table: SVectorTable,
}

impl FhvaeModel {
    pub fn new(hp: HyperParams, train_ids: &[String], rng: &mut impl Rng) -> Result<Self> {
        hp.validate()?;
        let nets = Networks::new(hp.net_shape(), rng);
        let table = SVectorTable::zeros(train_ids, hp.z2_dim)?;
        Ok(FhvaeModel { hp, nets, table })
    }
}

fn check_dims(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// `log N(x | μ, diag(exp(logvar)))`
pub fn logpdf_diag(x: &[f64], g: &GaussianDiag) -> Result<f64> {
    check_dims("logpdf_diag", x.len(), g.dim())?;
    Ok(-0.5
        * x.iter()
            .zip(&g.mean)
            .zip(&g.logvar)
            .map(|((x, m), lv)| LN_2PI + lv + (x - m).powi(2) * (-lv).exp())
            .sum::<f64>())
}

/// `KL(q || N(center, var·I))`
pub fn kl_diag_vs_isotropic(q: &GaussianDiag, center: &[f64], var: f64) -> Result<f64> {
    check_dims("kl_diag_vs_isotropic", center.len(), q.dim())?;
    if var.is_nan() || var <= 0.0 {
        return Err(Error::Config(format!("reference variance must be positive, got {var}")));
    }
    let lnv = var.ln();
    Ok(0.5
        * q.mean
            .iter()
            .zip(&q.logvar)
            .zip(center)
            .map(|((m, lv), c)| (lv.exp() + (m - c).powi(2)) / var - 1.0 + lnv - lv)
            .sum::<f64>())
}

/// Expected KL of q(z₂|x) against p(z₂|μ₂) under μ₂ ~ N(μ̃₂, σ²_{μ̃₂} I).
pub fn expected_kl_z2(q_z2: &GaussianDiag, mu_tilde: &[f64], hp: &HyperParams) -> Result<f64> {
    Ok(kl_diag_vs_isotropic(q_z2, mu_tilde, hp.var_z2)? + expected_kl_correction(q_z2.dim(), hp))
}

/// `(J/2) σ²_{μ̃₂} / σ²_{z₂}`
pub fn expected_kl_correction(dim: usize, hp: &HyperParams) -> f64 {
    0.5 * dim as f64 * hp.var_mu2_post / hp.var_z2
}

/// `log N(μ | 0, σ²_{μ₂} I)`
pub fn log_prior_mu2(mu: &[f64], hp: &HyperParams) -> f64 {
    let j = mu.len() as f64;
    -0.5 * j * (LN_2PI + hp.var_mu2.ln()) - 0.5 * mu.iter().map(|v| v * v).sum::<f64>() / hp.var_mu2
}

/// Row-wise `log N(x_r | mean_r, diag(exp(logvar_r)))`; inputs `[B, D]`, output `[B]`.
pub fn logpdf_rows<'t>(x: Var<'t>, mean: Var<'t>, logvar: Var<'t>) -> Var<'t> {
    let d = mean.value().cols() as f64;
    let quad = (x - mean).square() * (-logvar).exp();
    (logvar + quad).sum_last().offset(d * LN_2PI).scale(-0.5)
}

/// Row-wise KL of `N(mean, exp(logvar))` from `N(center, var·I)`; a `None`
/// center means zero.
pub fn kl_rows<'t>(mean: Var<'t>, logvar: Var<'t>, center: Option<Var<'t>>, var: f64) -> Var<'t> {
    let d = mean.value().cols() as f64;
    let diff = match center {
        Some(c) => mean - c,
        None => mean,
    };
    let inner = (logvar.exp() + diff.square()).scale(1.0 / var) - logvar;
    inner.sum_last().offset(d * (var.ln() - 1.0)).scale(0.5)
}

/// Row-wise `log N(mu_r | 0, var·I)`.
pub fn log_prior_rows<'t>(mu: Var<'t>, var: f64) -> Var<'t> {
    let d = mu.value().cols() as f64;
    mu.square().sum_last().scale(-0.5 / var).offset(-0.5 * d * (LN_2PI + var.ln()))
}
