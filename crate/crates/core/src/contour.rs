//! Initial contour map from the colour image.
//!
//! Detectors return white edges on black; [`extract_contours`] flips that to
//! dark strokes on a white page when `invert_polarity` is set. Canny is built
//! in; learned detectors (TEED, HED) plug in as external commands.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageBuffer, ImageError};

pub const DEFAULT_ALPHA: f64 = 0.55;
pub const DEFAULT_METHOD: &str = "teed";

const CANNY_SIGMA: f64 = 1.4;
const LOW_RATIO: f64 = 0.4;

#[derive(Debug, Error)]
pub enum ContourError {
    #[error("unknown contour method `{name}`; available: {}", available.join(", "))]
    UnknownMethod { name: String, available: Vec<String> },
    #[error("contour method `{0}` is already registered")]
    Duplicate(String),
    #[error("alpha must lie in (0,1), got {0}")]
    InvalidAlpha(f64),
    #[error("empty input image")]
    EmptyImage,
    #[error("contour method `{method}` failed: {message}")]
    Adapter { method: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    pub method: String,
    /// Stroke sparsity threshold; larger values keep fewer edges.
    pub alpha: f64,
    /// Dark strokes on a white page.
    pub invert_polarity: bool,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self {
            method: DEFAULT_METHOD.into(),
            alpha: DEFAULT_ALPHA,
            invert_polarity: true,
        }
    }
}

impl ContourParams {
    pub fn validate(&self) -> Result<(), ContourError> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(ContourError::InvalidAlpha(self.alpha))
        }
    }
}

/// Edge detector contract: grayscale input, white-on-black edge map out.
pub trait EdgeDetector: Send + Sync {
    fn detect(&self, gray: &ImageBuffer, alpha: f64) -> Result<ImageBuffer, String>;

    /// Detectors that are not reentrant get serialized by the registry.
    fn thread_safe(&self) -> bool {
        true
    }
}

/// Native Canny: Gaussian blur, Sobel, non-maximum suppression, hysteresis
/// with thresholds `(0.4·α·255, α·255)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Canny;

impl Canny {
    /// Gradient magnitude after the σ=1.4 blur, row-major.
    pub fn gradient_magnitude(gray: &ImageBuffer) -> Vec<f64> {
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let src: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
        let blurred = gaussian_blur(&src, w, h, CANNY_SIGMA);
        let (gx, gy) = sobel(&blurred, w, h);
        gx.iter().zip(&gy).map(|(a, b)| quantize(a.hypot(*b))).collect()
    }

    /// Binary edge mask and magnitude for a grayscale image.
    pub fn edges(gray: &ImageBuffer, alpha: f64) -> (Vec<bool>, Vec<f64>) {
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let src: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
        let blurred = gaussian_blur(&src, w, h, CANNY_SIGMA);
        let (gx, gy) = sobel(&blurred, w, h);
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| quantize(a.hypot(*b))).collect();
        let thin = non_max_suppression(&mag, &gx, &gy, w, h);
        let high = alpha * 255.0;
        let low = LOW_RATIO * high;
        (hysteresis(&thin, w, h, low, high), mag)
    }
}

impl EdgeDetector for Canny {
    fn detect(&self, gray: &ImageBuffer, alpha: f64) -> Result<ImageBuffer, String> {
        let (mask, mag) = Canny::edges(gray, alpha);
        let high = alpha * 255.0;
        let data = mask
            .iter()
            .zip(&mag)
            .map(|(&on, &m)| {
                if on {
                    (255.0 * (m / high).min(1.0)).round() as u8
                } else {
                    0
                }
            })
            .collect();
        ImageBuffer::new_gray(gray.width(), gray.height(), data).map_err(|e| e.to_string())
    }
}

// Mirror-symmetric inputs should tie exactly; rounding absorbs summation-order noise.
fn quantize(m: f64) -> f64 {
    (m * 1e6).round() / 1e6
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

pub(crate) fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp_idx(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp_idx(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn sobel(src: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| src[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

// Ties along the gradient keep the first pixel: strictly greater than the
// neighbour behind, at least the neighbour ahead.
fn non_max_suppression(mag: &[f64], gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let get = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as i64, y as i64);
            let behind = get(xi - dx, yi - dy);
            let ahead = get(xi + dx, yi + dy);
            if m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], w: usize, h: usize, low: f64, high: f64) -> Vec<bool> {
    let mut keep = vec![false; w * h];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            keep[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !keep[j] && thin[j] >= low && thin[j] > 0.0 {
                    keep[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    keep
}

/// Runs an external program per image.
///
/// Arguments may contain `{input}`, `{output}` and `{alpha}` placeholders;
/// the program reads a grayscale PNG and writes a white-on-black edge PNG.
#[derive(Clone, Debug)]
pub struct CommandDetector {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandDetector {
    /// Parses `program arg1 arg2 …` split on whitespace.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace();
        let program = PathBuf::from(parts.next()?);
        Some(Self {
            program,
            args: parts.map(str::to_string).collect(),
        })
    }
}

impl EdgeDetector for CommandDetector {
    fn detect(&self, gray: &ImageBuffer, alpha: f64) -> Result<ImageBuffer, String> {
        run_image_command(&self.program, &self.args, gray, &format!("{alpha}"))
            .map(|img| img.to_gray())
    }

    fn thread_safe(&self) -> bool {
        false
    }
}

/// Shared plumbing for command adapters: writes `input.png`, runs the
/// program, reads `output.png`.
pub(crate) fn run_image_command(
    program: &PathBuf,
    args: &[String],
    input: &ImageBuffer,
    alpha: &str,
) -> Result<ImageBuffer, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let in_path = dir.path().join("input.png");
    let out_path = dir.path().join("output.png");
    input.save_png(&in_path).map_err(|e| e.to_string())?;
    let args: Vec<String> = args
        .iter()
        .map(|a| {
            a.replace("{input}", &in_path.to_string_lossy())
                .replace("{output}", &out_path.to_string_lossy())
                .replace("{alpha}", alpha)
        })
        .collect();
    let status = Command::new(program)
        .args(&args)
        .status()
        .map_err(|e| format!("cannot run {}: {e}", program.display()))?;
    if !status.success() {
        return Err(format!("{} exited with {status}", program.display()));
    }
    ImageBuffer::load(&out_path).map_err(|e: ImageError| e.to_string())
}

struct Entry {
    detector: Arc<dyn EdgeDetector>,
    lock: Option<Arc<Mutex<()>>>,
}

/// Named edge detectors. A fresh registry knows only `canny`.
pub struct DetectorRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register_detector("canny", Arc::new(Canny))
            .expect("empty registry");
        r
    }
}

impl DetectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_detector(&mut self, name: &str, detector: Arc<dyn EdgeDetector>) -> Result<(), ContourError> {
        if self.entries.contains_key(name) {
            return Err(ContourError::Duplicate(name.to_string()));
        }
        let lock = (!detector.thread_safe()).then(|| Arc::new(Mutex::new(())));
        self.entries.insert(name.to_string(), Entry { detector, lock });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn extract_contours(&self, img: &ImageBuffer, params: &ContourParams) -> Result<ImageBuffer, ContourError> {
        params.validate()?;
        if img.pixel_count() == 0 {
            return Err(ContourError::EmptyImage);
        }
        let entry = self
            .entries
            .get(&params.method)
            .ok_or_else(|| ContourError::UnknownMethod {
                name: params.method.clone(),
                available: self.names(),
            })?;
        let gray = img.to_gray();
        let _guard = entry.lock.as_ref().map(|l| l.lock().unwrap_or_else(|p| p.into_inner()));
        let edges = entry
            .detector
            .detect(&gray, params.alpha)
            .map_err(|message| ContourError::Adapter {
                method: params.method.clone(),
                message,
            })?;
        if edges.width() != img.width() || edges.height() != img.height() {
            return Err(ContourError::Adapter {
                method: params.method.clone(),
                message: format!(
                    "returned {}x{} for a {}x{} input",
                    edges.width(),
                    edges.height(),
                    img.width(),
                    img.height()
                ),
            });
        }
        let edges = edges.to_gray();
        Ok(if params.invert_polarity {
            edges.inverted()
        } else {
            edges
        })
    }
}

/// Contour extraction with the built-in registry.
pub fn extract_contours(img: &ImageBuffer, params: &ContourParams) -> Result<ImageBuffer, ContourError> {
    DetectorRegistry::default().extract_contours(img, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canny(alpha: f64) -> ContourParams {
        ContourParams {
            method: "canny".into(),
            alpha,
            invert_polarity: true,
        }
    }

    #[test]
    fn defaults() {
        let p = ContourParams::default();
        assert_eq!(p.method, "teed");
        assert_eq!(p.alpha, 0.55);
        assert!(p.invert_polarity);
    }

    #[test]
    fn constant_image_is_blank_page() {
        let img = ImageBuffer::filled_rgb(32, 24, [90, 140, 10]);
        let out = extract_contours(&img, &canny(0.55)).unwrap();
        assert!(out.is_gray());
        assert!(out.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn step_edge_yields_one_dark_column() {
        let img = ImageBuffer::from_fn_gray(32, 16, |x, _| if x < 16 { 0 } else { 255 });
        let out = extract_contours(&img, &canny(0.55)).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                let v = out.get(x, y, 0);
                if x == 15 {
                    assert!(v < 128, "({x},{y}) = {v}");
                } else {
                    assert_eq!(v, 255, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn unknown_method_lists_available() {
        let img = ImageBuffer::filled_gray(8, 8, 0);
        let err = extract_contours(&img, &ContourParams::default()).unwrap_err();
        match err {
            ContourError::UnknownMethod { name, available } => {
                assert_eq!(name, "teed");
                assert_eq!(available, vec!["canny".to_string()]);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn registration() {
        struct Blank;
        impl EdgeDetector for Blank {
            fn detect(&self, gray: &ImageBuffer, _: f64) -> Result<ImageBuffer, String> {
                Ok(ImageBuffer::filled_gray(gray.width(), gray.height(), 0))
            }
        }
        let mut reg = DetectorRegistry::new();
        reg.register_detector("blank", Arc::new(Blank)).unwrap();
        assert!(matches!(
            reg.register_detector("blank", Arc::new(Blank)),
            Err(ContourError::Duplicate(_))
        ));
        let p = ContourParams {
            method: "blank".into(),
            ..ContourParams::default()
        };
        let out = reg.extract_contours(&ImageBuffer::filled_gray(4, 4, 9), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn alpha_out_of_range() {
        let img = ImageBuffer::filled_gray(8, 8, 0);
        assert!(matches!(extract_contours(&img, &canny(1.0)), Err(ContourError::InvalidAlpha(_))));
        assert!(matches!(extract_contours(&img, &canny(0.0)), Err(ContourError::InvalidAlpha(_))));
    }

    #[test]
    fn adapter_failure_names_method() {
        struct Broken;
        impl EdgeDetector for Broken {
            fn detect(&self, _: &ImageBuffer, _: f64) -> Result<ImageBuffer, String> {
                Err("weights missing".into())
            }
        }
        let mut reg = DetectorRegistry::new();
        reg.register_detector("hed", Arc::new(Broken)).unwrap();
        let p = ContourParams {
            method: "hed".into(),
            ..ContourParams::default()
        };
        let err = reg.extract_contours(&ImageBuffer::filled_gray(4, 4, 0), &p).unwrap_err();
        assert!(err.to_string().contains("hed") && err.to_string().contains("weights missing"));
    }

    #[test]
    fn polarity_flag() {
        let img = ImageBuffer::filled_gray(8, 8, 50);
        let mut p = canny(0.5);
        p.invert_polarity = false;
        let raw = extract_contours(&img, &p).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0));
        assert_eq!(raw.inverted().inverted(), raw);
    }
}
