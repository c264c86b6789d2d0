//! Evaluation metrics: PSNR and SSIM computed natively, LPIPS/FID/KID over
//! a pluggable feature extractor.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::image::ImageBuffer;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const FID_JITTER: f64 = 1e-6;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32, u8), (u32, u32, u8)),
    #[error("expected grayscale input")]
    NotGray,
    #[error("need at least 2 feature vectors per set, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("feature dimensions differ: {0} vs {1}")]
    FeatureDimension(usize, usize),
    #[error("feature extractor `{id}` failed: {message}")]
    Extractor { id: String, message: String },
    #[error("unknown metric `{0}`; expected psnr, ssim, lpips, fid or kid")]
    UnknownMetric(String),
}

fn shape(img: &ImageBuffer) -> (u32, u32, u8) {
    (img.width(), img.height(), img.channels())
}

fn same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if shape(a) == shape(b) {
        Ok(())
    } else {
        Err(MetricError::DimensionMismatch(shape(a), shape(b)))
    }
}

/// `10·log10(255²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5).
/// Images smaller than the window use one window the size of the shorter side.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    if !a.is_gray() {
        return Err(MetricError::NotGray);
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    let size = SSIM_WINDOW.min(w).min(h);
    let g = gaussian_window(size, SSIM_SIGMA);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - size) {
        for x0 in 0..=(w - size) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, gy) in g.iter().enumerate() {
                for (i, gx) in g.iter().enumerate() {
                    let k = (y0 + j) * w + x0 + i;
                    let wt = gy * gx;
                    let (va, vb) = (ad[k] as f64, bd[k] as f64);
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Feature extractor for the distribution metrics and LPIPS.
pub trait FeatureExtractor: Send + Sync {
    /// Pinned identifier recorded in every report.
    fn id(&self) -> &str;
    fn features(&self, rgb: &ImageBuffer) -> Result<Vec<f64>, String>;
}

/// Four hand-computable features: per-channel means and the grayscale
/// standard deviation, all divided by 255.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockFeatureExtractor;

impl FeatureExtractor for MockFeatureExtractor {
    fn id(&self) -> &str {
        "mock-stats-4"
    }

    fn features(&self, rgb: &ImageBuffer) -> Result<Vec<f64>, String> {
        let rgb = rgb.to_rgb();
        let n = rgb.pixel_count() as f64;
        let mut f = vec![0.0; 4];
        for px in rgb.data().chunks_exact(3) {
            for c in 0..3 {
                f[c] += px[c] as f64;
            }
        }
        for v in f.iter_mut().take(3) {
            *v /= n * 255.0;
        }
        let gray = rgb.to_gray();
        let mean = gray.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = gray.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        f[3] = var.sqrt() / 255.0;
        Ok(f)
    }
}

fn extract(ex: &dyn FeatureExtractor, img: &ImageBuffer) -> Result<Vec<f64>, MetricError> {
    // Sketches are replicated to three channels first.
    ex.features(&img.to_rgb()).map_err(|message| MetricError::Extractor {
        id: ex.id().to_string(),
        message,
    })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Squared distance between unit-normalized feature vectors.
pub fn lpips(a: &ImageBuffer, b: &ImageBuffer, extractor: &dyn FeatureExtractor) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let (fa, fb) = (unit(&extract(extractor, a)?), unit(&extract(extractor, b)?));
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum())
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize, MetricError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::TooFewSamples(a.len(), b.len()));
    }
    let d = a[0].len();
    for v in a.iter().chain(b) {
        if v.len() != d {
            return Err(MetricError::FeatureDimension(d, v.len()));
        }
    }
    Ok(d)
}

fn mean_cov(set: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    (mu, cov / (n - 1.0))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(m.clone());
    let max = e.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    e.eigenvalues.iter().any(|&v| v <= 1e-12 * max.max(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FidValue {
    pub value: f64,
    /// Diagonal jitter was added because a covariance was singular.
    pub jittered: bool,
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FidValue, MetricError> {
    let d = check_sets(a, b)?;
    let (mu_a, mut ca) = mean_cov(a, d);
    let (mu_b, mut cb) = mean_cov(b, d);
    let jittered = is_singular(&ca) || is_singular(&cb);
    if jittered {
        let j = DMatrix::identity(d, d) * FID_JITTER;
        ca += &j;
        cb += j;
    }
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    let value = diff + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FidValue {
        value: value.max(0.0),
        jittered,
    })
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel `(x·y/d + 1)³`.
///
/// Equal set sizes use the U-statistic that also drops `i = j` cross terms,
/// so a set compared with itself scores exactly zero.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    check_sets(a, b)?;
    let (m, n) = (a.len(), b.len());
    if m == n {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += poly_kernel(&a[i], &a[j]) + poly_kernel(&b[i], &b[j])
                        - poly_kernel(&a[i], &b[j])
                        - poly_kernel(&a[j], &b[i]);
                }
            }
        }
        return Ok(s / (m * (m - 1)) as f64);
    }
    let off_diag = |s: &[Vec<f64>]| {
        let k = s.len();
        let mut t = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    t += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        t / (k * (k - 1)) as f64
    };
    let cross: f64 = a.iter().flat_map(|x| b.iter().map(move |y| poly_kernel(x, y))).sum::<f64>() / (m * n) as f64;
    Ok(off_diag(a) + off_diag(b) - 2.0 * cross)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Lpips,
    Fid,
    Kid,
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "psnr" => Metric::Psnr,
            "ssim" => Metric::Ssim,
            "lpips" => Metric::Lpips,
            "fid" => Metric::Fid,
            "kid" => Metric::Kid,
            other => return Err(MetricError::UnknownMetric(other.into())),
        })
    }
}

pub fn parse_metrics(list: &str) -> Result<BTreeSet<Metric>, MetricError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemMetrics {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub psnr: Option<Summary>,
    pub ssim: Option<Summary>,
    pub lpips: Option<Summary>,
    pub fid: Option<FidValue>,
    pub kid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub aggregate: Aggregate,
    pub extractor: Option<String>,
    pub item_count: usize,
    pub succeeded: usize,
    pub preprocessing: String,
    pub notices: Vec<String>,
}

/// One evaluated pair: prediction and ground truth, or why it is missing.
pub struct EvalItem {
    pub name: String,
    pub pair: Result<(ImageBuffer, ImageBuffer), String>,
}

/// Scores each pair and aggregates over the successful ones.
///
/// Predictions are converted to grayscale and resized to the ground truth
/// when sizes differ.
pub fn evaluate(
    items: Vec<EvalItem>,
    metrics: &BTreeSet<Metric>,
    extractor: Option<&dyn FeatureExtractor>,
) -> MetricReport {
    let mut notices = Vec::new();
    let needs_features = metrics.iter().any(|m| matches!(m, Metric::Lpips | Metric::Fid | Metric::Kid));
    if needs_features && extractor.is_none() {
        notices.push("no feature extractor configured; lpips, fid and kid omitted".to_string());
    }
    let item_count = items.len();
    let mut rows = Vec::with_capacity(item_count);
    let (mut feats_pred, mut feats_gt) = (Vec::new(), Vec::new());
    for item in items {
        let mut row = ItemMetrics {
            name: item.name,
            psnr: None,
            ssim: None,
            lpips: None,
            error: None,
        };
        let result = item.pair.and_then(|(pred, gt)| {
            let gt = gt.to_gray();
            let mut pred = pred.to_gray();
            if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
                pred = pred.resized(gt.width(), gt.height());
            }
            let mut run = || -> Result<(), MetricError> {
                if metrics.contains(&Metric::Psnr) {
                    row.psnr = Some(psnr(&pred, &gt)?);
                }
                if metrics.contains(&Metric::Ssim) {
                    row.ssim = Some(ssim(&pred, &gt)?);
                }
                if let Some(ex) = extractor {
                    if metrics.contains(&Metric::Lpips) {
                        row.lpips = Some(lpips(&pred, &gt, ex)?);
                    }
                    if metrics.contains(&Metric::Fid) || metrics.contains(&Metric::Kid) {
                        feats_pred.push(extract(ex, &pred)?);
                        feats_gt.push(extract(ex, &gt)?);
                    }
                }
                Ok(())
            };
            run().map_err(|e| e.to_string())
        });
        if let Err(e) = result {
            row.psnr = None;
            row.ssim = None;
            row.lpips = None;
            row.error = Some(e);
        }
        rows.push(row);
    }
    let ok: Vec<&ItemMetrics> = rows.iter().filter(|r| r.error.is_none()).collect();
    let collect = |f: fn(&ItemMetrics) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
    let mut aggregate = Aggregate {
        psnr: Summary::of(&collect(|r| r.psnr)),
        ssim: Summary::of(&collect(|r| r.ssim)),
        lpips: Summary::of(&collect(|r| r.lpips)),
        ..Aggregate::default()
    };
    if extractor.is_some() {
        if metrics.contains(&Metric::Fid) {
            match fid(&feats_pred, &feats_gt) {
                Ok(v) => {
                    if v.jittered {
                        notices.push(format!("fid: singular covariance, added {FID_JITTER:e} diagonal jitter"));
                    }
                    aggregate.fid = Some(v);
                }
                Err(e) => notices.push(format!("fid omitted: {e}")),
            }
        }
        if metrics.contains(&Metric::Kid) {
            match kid(&feats_pred, &feats_gt) {
                Ok(v) => aggregate.kid = Some(v),
                Err(e) => notices.push(format!("kid omitted: {e}")),
            }
        }
    }
    MetricReport {
        succeeded: ok.len(),
        items: rows,
        aggregate,
        extractor: extractor.map(|e| e.id().to_string()),
        item_count,
        preprocessing: "grayscale; prediction resized to ground truth when sizes differ; features on 3-channel replicas".into(),
        notices,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    /// Tab-separated rows, one per item, then an aggregate `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name\tpsnr\tssim\tlpips\terror\n");
        for r in &self.items {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.name,
                cell(r.psnr),
                cell(r.ssim),
                cell(r.lpips),
                r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ")
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "mean\t{}\t{}\t{}\t",
            cell(a.psnr.map(|s| s.mean)),
            cell(a.ssim.map(|s| s.mean)),
            cell(a.lpips.map(|s| s.mean))
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
