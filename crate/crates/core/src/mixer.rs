//! Mixture of self-attention.
//!
//! At each target site the generating trajectory's own tensors are dropped.
//! The query becomes
//!
//! ```text
//! Q^m = ζ · (β · Q^c + (1 − β) · Q^s) + (1 − ζ) · Q^r
//! ```
//!
//! built from the colour, contour and reference banks, and the output is
//! `softmax(Q^m K^rᵀ / √d) V^r` with the reference keys and values. Every
//! other site runs unchanged.

use std::collections::BTreeSet;

use ndarray::{Array, Array2, Array3, ArrayView, ArrayView2, ArrayView3, Dimension, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnbank::{BankKey, BankSet, BankSource, TensorKind};
use crate::backend::{AttentionController, AttentionOverride, AttentionSiteId, ControllerError, Qkv};

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target sites {missing:?} are not attention sites of this backend")]
    UnknownSites { missing: Vec<usize> },
}

/// Control knobs of the query mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    /// Weight of the colour/contour blend against the reference query.
    pub zeta: f64,
    /// Weight of the colour query against the contour query.
    pub beta: f64,
    /// Indices of the self-attention sites that receive the mixture.
    pub target_sites: BTreeSet<usize>,
    /// Head dimension used for the `1/√d` scale; `None` reads it from the tensors.
    pub scale_d: Option<usize>,
}

pub const DEFAULT_ZETA: f64 = 0.4;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_TARGET_SITES: [usize; 2] = [10, 11];

impl Default for MixParams {
    fn default() -> Self {
        Self {
            zeta: DEFAULT_ZETA,
            beta: DEFAULT_BETA,
            target_sites: DEFAULT_TARGET_SITES.into_iter().collect(),
            scale_d: None,
        }
    }
}

fn clamp_unit(name: &str, v: f64) -> f64 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    if c != v {
        log::warn!("{name}={v} outside [0, 1], clamped to {c}");
    }
    c
}

impl MixParams {
    /// Builds params with `zeta` and `beta` clamped into `[0, 1]`.
    pub fn new(zeta: f64, beta: f64) -> Self {
        Self {
            zeta: clamp_unit("zeta", zeta),
            beta: clamp_unit("beta", beta),
            ..Self::default()
        }
    }

    pub fn with_target_sites(mut self, sites: impl IntoIterator<Item = usize>) -> Self {
        self.target_sites = sites.into_iter().collect();
        self
    }

    /// Re-applies the `[0, 1]` clamp, e.g. after deserializing.
    pub fn clamped(mut self) -> Self {
        self.zeta = clamp_unit("zeta", self.zeta);
        self.beta = clamp_unit("beta", self.beta);
        self
    }

    /// Coefficients of `(Q^c, Q^s, Q^r)`; they sum to one.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        (
            self.zeta * self.beta,
            self.zeta * (1.0 - self.beta),
            1.0 - self.zeta,
        )
    }

    pub fn validate_sites(&self, available: &[AttentionSiteId]) -> Result<(), MixError> {
        let missing: Vec<usize> = self
            .target_sites
            .iter()
            .copied()
            .filter(|i| !available.iter().any(|s| s.index == *i))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(MixError::UnknownSites { missing })
        }
    }
}

/// `ζ·(β·Q^c + (1−β)·Q^s) + (1−ζ)·Q^r`, elementwise.
pub fn blend_queries<D: Dimension>(
    qc: &ArrayView<f64, D>,
    qs: &ArrayView<f64, D>,
    qr: &ArrayView<f64, D>,
    p: &MixParams,
) -> Result<Array<f64, D>, MixError> {
    if qc.shape() != qs.shape() || qc.shape() != qr.shape() {
        return Err(MixError::Shape(format!(
            "Qc {:?}, Qs {:?}, Qr {:?}",
            qc.shape(),
            qs.shape(),
            qr.shape()
        )));
    }
    let (zeta, beta) = (p.zeta, p.beta);
    Ok(Zip::from(qc)
        .and(qs)
        .and(qr)
        .map_collect(|&c, &s, &r| zeta * (beta * c + (1.0 - beta) * s) + (1.0 - zeta) * r))
}

/// Row-wise `softmax(q kᵀ · scale)` for one head.
pub fn attention_weights(q: &ArrayView2<f64>, k: &ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut logits = q.dot(&k.t());
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) * scale).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// Multi-head scaled dot-product attention, inputs `heads × tokens × dim`.
pub fn softmax_attention(
    q: &ArrayView3<f64>,
    k: &ArrayView3<f64>,
    v: &ArrayView3<f64>,
    scale: f64,
) -> Array3<f64> {
    let (heads, tq, _) = q.dim();
    let dv = v.dim().2;
    let mut out = Array3::zeros((heads, tq, dv));
    for h in 0..heads {
        let w = attention_weights(&q.index_axis(ndarray::Axis(0), h), &k.index_axis(ndarray::Axis(0), h), scale);
        out.index_axis_mut(ndarray::Axis(0), h)
            .assign(&w.dot(&v.index_axis(ndarray::Axis(0), h)));
    }
    out
}

/// `softmax(Q^m K^rᵀ/√d) V^r`, per head.
pub fn mixed_attention(
    qm: &ArrayView3<f64>,
    kr: &ArrayView3<f64>,
    vr: &ArrayView3<f64>,
    p: &MixParams,
) -> Result<Array3<f64>, MixError> {
    let (hq, _, dq) = qm.dim();
    let (hk, tk, dk) = kr.dim();
    let (hv, tv, _) = vr.dim();
    if hq != hk || hk != hv {
        return Err(MixError::Shape(format!("head counts {hq}/{hk}/{hv} differ")));
    }
    if tk != tv {
        return Err(MixError::Shape(format!("K has {tk} tokens, V has {tv}")));
    }
    if dq != dk {
        return Err(MixError::Shape(format!("Q head dim {dq} != K head dim {dk}")));
    }
    let d = p.scale_d.unwrap_or(dq);
    Ok(softmax_attention(qm, kr, vr, 1.0 / (d as f64).sqrt()))
}

/// Single-head convenience form of [`mixed_attention`].
pub fn mixed_attention_head(
    qm: &ArrayView2<f64>,
    kr: &ArrayView2<f64>,
    vr: &ArrayView2<f64>,
    p: &MixParams,
) -> Result<Array2<f64>, MixError> {
    let lift = |a: &ArrayView2<f64>| a.to_owned().insert_axis(ndarray::Axis(0));
    let out = mixed_attention(&lift(qm).view(), &lift(kr).view(), &lift(vr).view(), p)?;
    Ok(out.index_axis_move(ndarray::Axis(0), 0))
}

/// Target-site attention output recorded during generation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub timestep: usize,
    pub site: AttentionSiteId,
    pub output: Array3<f64>,
}

/// Which query sources the controller blends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixToggles {
    /// Blend colour and contour queries by β; when off only the contour query is used.
    pub decompose_texture: bool,
}

impl Default for MixToggles {
    fn default() -> Self {
        Self {
            decompose_texture: true,
        }
    }
}

/// Attention controller that applies the query mixture at target sites.
pub struct MixController<'a> {
    banks: &'a BankSet,
    params: MixParams,
    dump: Option<Vec<AttentionDump>>,
}

impl<'a> MixController<'a> {
    pub fn dumps(&self) -> Option<&[AttentionDump]> {
        self.dump.as_deref()
    }

    pub fn into_dumps(self) -> Option<Vec<AttentionDump>> {
        self.dump
    }

    fn fetch(&self, source: BankSource, kind: TensorKind, site: AttentionSiteId, t: usize) -> Result<Array3<f64>, ControllerError> {
        let key = BankKey::new(t, site, kind, source);
        self.banks
            .get(source)
            .lookup(&key)
            .map(|tensor| tensor.to_array())
            .map_err(|e| ControllerError(e.to_string()))
    }
}

/// Builds the controller used while sampling from the contour latent.
///
/// With `toggles.decompose_texture` off, `β` is treated as 0.
pub fn make_controller<'a>(
    banks: &'a BankSet,
    params: &MixParams,
    toggles: MixToggles,
    record_dump: bool,
) -> MixController<'a> {
    let mut params = params.clone();
    if !toggles.decompose_texture {
        params.beta = 0.0;
    }
    MixController {
        banks,
        params,
        dump: record_dump.then(Vec::new),
    }
}

impl AttentionController for MixController<'_> {
    fn intercept(
        &mut self,
        site: AttentionSiteId,
        timestep: usize,
        qkv: Qkv,
    ) -> Result<AttentionOverride, ControllerError> {
        if !self.params.target_sites.contains(&site.index) {
            return Ok(AttentionOverride::Replace(qkv));
        }
        let qr = self.fetch(BankSource::Reference, TensorKind::Q, site, timestep)?;
        let kr = self.fetch(BankSource::Reference, TensorKind::K, site, timestep)?;
        let vr = self.fetch(BankSource::Reference, TensorKind::V, site, timestep)?;
        let qs = self.fetch(BankSource::Contour, TensorKind::Q, site, timestep)?;
        // β = 0 never reads the colour bank.
        let qc = if self.params.zeta * self.params.beta == 0.0 {
            qs.clone()
        } else {
            self.fetch(BankSource::Color, TensorKind::Q, site, timestep)?
        };
        let qm = blend_queries(&qc.view(), &qs.view(), &qr.view(), &self.params)
            .map_err(|e| ControllerError(e.to_string()))?;
        let out = mixed_attention(&qm.view(), &kr.view(), &vr.view(), &self.params)
            .map_err(|e| ControllerError(e.to_string()))?;
        if out.dim() != qkv.q.dim() {
            return Err(ControllerError(format!(
                "mixed output {:?} does not match live token grid {:?}",
                out.dim(),
                qkv.q.dim()
            )));
        }
        if let Some(dump) = self.dump.as_mut() {
            dump.push(AttentionDump {
                timestep,
                site,
                output: out.clone(),
            });
        }
        Ok(AttentionOverride::Output(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn blend_worked_example() {
        let qc = array![1.0, 0.0];
        let qs = array![0.0, 1.0];
        let qr = array![2.0, 2.0];
        let p = MixParams::new(0.5, 0.5);
        let qm = blend_queries(&qc.view(), &qs.view(), &qr.view(), &p).unwrap();
        assert_eq!(qm, array![1.25, 1.25]);
    }

    #[test]
    fn blend_rejects_mismatched_shapes() {
        let a = array![1.0, 2.0];
        let b = array![1.0, 2.0, 3.0];
        assert!(matches!(
            blend_queries(&a.view(), &a.view(), &b.view(), &MixParams::default()),
            Err(MixError::Shape(_))
        ));
    }

    #[test]
    fn params_clamp_and_defaults() {
        let p = MixParams::new(1.7, -0.2);
        assert_eq!((p.zeta, p.beta), (1.0, 0.0));
        let d = MixParams::default();
        assert_eq!((d.zeta, d.beta), (0.4, 0.5));
        assert_eq!(d.target_sites.iter().copied().collect::<Vec<_>>(), vec![10, 11]);
        let (a, b, c) = MixParams::new(0.3, 0.8).coefficients();
        assert!((a + b + c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = array![[0.3, -1.0], [5.0, 2.0], [0.0, 0.0]];
        let k = array![[1.0, 1.0]];
        let v = array![[7.0, -3.0]];
        let out = mixed_attention_head(&q.view(), &k.view(), &v.view(), &MixParams::default()).unwrap();
        for row in out.rows() {
            assert!((row[0] - 7.0).abs() < 1e-12 && (row[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = array![[0.3, -1.0], [5.0, 2.0]];
        let k = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let v = array![[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]];
        let out = mixed_attention_head(&q.view(), &k.view(), &v.view(), &MixParams::default()).unwrap();
        for row in out.rows() {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_dimension_checks() {
        let p = MixParams::default();
        let q = Array3::<f64>::zeros((1, 2, 4));
        let k = Array3::<f64>::zeros((1, 3, 4));
        let v = Array3::<f64>::zeros((1, 2, 4));
        assert!(mixed_attention(&q.view(), &k.view(), &v.view(), &p).is_err());
        let k = Array3::<f64>::zeros((1, 2, 3));
        assert!(mixed_attention(&q.view(), &k.view(), &v.view(), &p).is_err());
    }

    #[test]
    fn unknown_target_sites_are_reported() {
        let sites: Vec<AttentionSiteId> = (0..4)
            .map(|index| AttentionSiteId { index, stage: crate::backend::Stage::Decoder })
            .collect();
        let p = MixParams::default();
        assert_eq!(
            p.validate_sites(&sites),
            Err(MixError::UnknownSites { missing: vec![10, 11] })
        );
        assert!(p.with_target_sites([1, 2]).validate_sites(&sites).is_ok());
    }
}
