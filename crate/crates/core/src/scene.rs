//! Optional foreground isolation: a saliency mask composited over white so
//! the sketch covers the subject only.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::contour::run_image_command;
use crate::image::ImageBuffer;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },
    #[error("mask value {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("unknown saliency adapter `{name}`; available: {}", available.join(", "))]
    UnknownAdapter { name: String, available: Vec<String> },
    #[error("saliency adapter `{0}` is already registered")]
    Duplicate(String),
    #[error("saliency adapter `{adapter}` failed: {message}")]
    Adapter { adapter: String, message: String },
}

/// Per-pixel foreground weight in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl ForegroundMask {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, SceneError> {
        if values.len() != width as usize * height as usize {
            return Err(SceneError::DimensionMismatch {
                mask_w: values.len() as u32,
                mask_h: 1,
                img_w: width,
                img_h: height,
            });
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SceneError::OutOfRange(bad));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value.clamp(0.0, 1.0); width as usize * height as usize],
        }
    }

    /// Reads a grayscale image as a mask, 255 meaning foreground.
    pub fn from_gray(img: &ImageBuffer) -> Self {
        let g = img.to_gray();
        Self {
            width: g.width(),
            height: g.height(),
            values: g.data().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn thresholded(&self, cut: f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| if v >= cut { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    pub fn area_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Salient-object predictor.
pub trait SaliencyAdapter: Send + Sync {
    fn predict(&self, img: &ImageBuffer) -> Result<ForegroundMask, String>;

    fn thread_safe(&self) -> bool {
        true
    }
}

/// Returns the same value everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantSaliency(pub f64);

impl SaliencyAdapter for ConstantSaliency {
    fn predict(&self, img: &ImageBuffer) -> Result<ForegroundMask, String> {
        Ok(ForegroundMask::filled(img.width(), img.height(), self.0))
    }
}

/// Echoes a known alpha channel, optionally hard-thresholded at `cut`.
#[derive(Clone, Debug)]
pub struct AlphaEchoSaliency {
    pub alpha: ImageBuffer,
    pub cut: Option<u8>,
}

impl SaliencyAdapter for AlphaEchoSaliency {
    fn predict(&self, _img: &ImageBuffer) -> Result<ForegroundMask, String> {
        let mask = ForegroundMask::from_gray(&self.alpha);
        Ok(match self.cut {
            Some(c) => mask.thresholded(c as f64 / 255.0),
            None => mask,
        })
    }
}

/// External salient-object model; same placeholder contract as
/// [`crate::contour::CommandDetector`], output read as a grayscale mask.
#[derive(Clone, Debug)]
pub struct CommandSaliency {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SaliencyAdapter for CommandSaliency {
    fn predict(&self, img: &ImageBuffer) -> Result<ForegroundMask, String> {
        run_image_command(&self.program, &self.args, img, "0.5").map(|m| ForegroundMask::from_gray(&m))
    }

    fn thread_safe(&self) -> bool {
        false
    }
}

struct Entry {
    adapter: Arc<dyn SaliencyAdapter>,
    lock: Option<Arc<Mutex<()>>>,
}

/// Named saliency adapters. A fresh registry holds `full` (mask ≡ 1).
pub struct SaliencyRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for SaliencyRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("full", Arc::new(ConstantSaliency(1.0))).expect("empty registry");
        r
    }
}

impl SaliencyRegistry {
    pub fn register(&mut self, name: &str, adapter: Arc<dyn SaliencyAdapter>) -> Result<(), SceneError> {
        if self.entries.contains_key(name) {
            return Err(SceneError::Duplicate(name.into()));
        }
        let lock = (!adapter.thread_safe()).then(|| Arc::new(Mutex::new(())));
        self.entries.insert(name.into(), Entry { adapter, lock });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn mask(&self, name: &str, img: &ImageBuffer) -> Result<ForegroundMask, SceneError> {
        let entry = self.entries.get(name).ok_or_else(|| SceneError::UnknownAdapter {
            name: name.into(),
            available: self.names(),
        })?;
        let _guard = entry.lock.as_ref().map(|l| l.lock().unwrap_or_else(|p| p.into_inner()));
        extract_foreground_mask(img, entry.adapter.as_ref()).map_err(|e| match e {
            SceneError::Adapter { message, .. } => SceneError::Adapter {
                adapter: name.into(),
                message,
            },
            other => other,
        })
    }
}

pub fn extract_foreground_mask(img: &ImageBuffer, adapter: &dyn SaliencyAdapter) -> Result<ForegroundMask, SceneError> {
    let mask = adapter.predict(img).map_err(|message| SceneError::Adapter {
        adapter: "adapter".into(),
        message,
    })?;
    check_dims(img, &mask)?;
    if let Some(&bad) = mask.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SceneError::OutOfRange(bad));
    }
    Ok(mask)
}

fn check_dims(img: &ImageBuffer, mask: &ForegroundMask) -> Result<(), SceneError> {
    if img.width() != mask.width || img.height() != mask.height {
        return Err(SceneError::DimensionMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            img_w: img.width(),
            img_h: img.height(),
        });
    }
    Ok(())
}

/// `mask·img + (1−mask)·255` per channel; `hard` thresholds the mask at 0.5 first.
pub fn composite_on_white(img: &ImageBuffer, mask: &ForegroundMask, hard: bool) -> Result<ImageBuffer, SceneError> {
    check_dims(img, mask)?;
    let mask = if hard { mask.thresholded(0.5) } else { mask.clone() };
    let c = img.channels() as usize;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let m = mask.values[i / c];
            (m * p as f64 + (1.0 - m) * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(ImageBuffer::new(img.width(), img.height(), img.channels(), data).expect("same layout"))
}
