//! Denoiser backends: the autoencoder plus noise-predicting U-Net, seen
//! through a narrow interface with self-attention interception.
//!
//! Every backend reports the ordered list of its self-attention sites and
//! calls an [`AttentionController`] once per site per forward pass. The
//! controller sees the projected, per-head `Q`/`K`/`V` tensors and may pass
//! them through, replace them, or supply the attention output directly.

mod checkpoint;
mod mock;

use std::fmt;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddim::NoiseSchedule;
use crate::image::ImageBuffer;

pub use checkpoint::{open_checkpoint, sd14_capabilities, sd14_schedule, sd14_sites, WeightSource};
pub use mock::{MockAutoencoder, MockBackend, MockConfig, MockDenoiser, ScalarLinearBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("image {width}x{height} is not divisible by the downsampling factor {factor}")]
    DimensionMismatch { width: u32, height: u32, factor: u32 },
    #[error("latent shape {actual:?} does not match backend contract {expected}")]
    LatentShape { expected: String, actual: Vec<usize> },
    #[error("latent contains non-finite values")]
    NonFinite,
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("attention controller failed at site {site} (t={timestep}): {message}")]
    Controller {
        site: AttentionSiteId,
        timestep: usize,
        message: String,
    },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("unknown backend id '{0}'; expected mock, mock-echo, mock-zero, mock-identity or sd14:<weights>")]
    UnknownBackend(String),
}

/// Latent array of shape `(C, H/f, W/f)` tagged with the timestep it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f64>,
    pub timestep_tag: usize,
}

impl LatentGrid {
    pub fn new(values: Array3<f64>, timestep_tag: usize) -> Self {
        Self {
            values,
            timestep_tag,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Middle,
    Decoder,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Encoder => 0,
            Stage::Middle => 1,
            Stage::Decoder => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Stage::Encoder),
            1 => Some(Stage::Middle),
            2 => Some(Stage::Decoder),
            _ => None,
        }
    }
}

/// A self-attention layer, numbered in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionSiteId {
    pub index: usize,
    pub stage: Stage,
}

impl fmt::Display for AttentionSiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.index, self.stage)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Capabilities {
    pub id: String,
    pub downsample_factor: u32,
    pub latent_channels: usize,
    pub sites: Vec<AttentionSiteId>,
    pub supports_guidance: bool,
}

/// Projected attention tensors, each `heads × tokens × head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
}

/// What a controller hands back to the backend.
#[derive(Clone, Debug)]
pub enum AttentionOverride {
    /// Compute ordinary softmax attention on these tensors.
    Replace(Qkv),
    /// Use this `heads × tokens × head_dim` tensor as the attention output.
    Output(Array3<f64>),
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ControllerError(pub String);

/// Hook invoked once per self-attention site per forward pass.
pub trait AttentionController {
    fn intercept(
        &mut self,
        site: AttentionSiteId,
        timestep: usize,
        qkv: Qkv,
    ) -> Result<AttentionOverride, ControllerError>;
}

/// Passes every tensor through unchanged.
#[derive(Debug, Default)]
pub struct IdentityController;

impl AttentionController for IdentityController {
    fn intercept(
        &mut self,
        _site: AttentionSiteId,
        _timestep: usize,
        qkv: Qkv,
    ) -> Result<AttentionOverride, ControllerError> {
        Ok(AttentionOverride::Replace(qkv))
    }
}

/// The autoencoder and noise predictor of a latent diffusion model.
///
/// Implementations need `&mut self` for a forward pass; callers serialize
/// predictions on one instance.
pub trait DenoiserBackend: Send {
    fn capabilities(&self) -> &Capabilities;

    /// Training schedule the noise predictor was built for.
    fn native_schedule(&self) -> NoiseSchedule;

    fn encode_image(&self, img: &ImageBuffer) -> Result<LatentGrid, BackendError>;

    fn decode_latent(&self, z: &LatentGrid) -> Result<ImageBuffer, BackendError>;

    fn predict_noise(
        &mut self,
        z: &LatentGrid,
        t: usize,
        controller: Option<&mut dyn AttentionController>,
        guidance_scale: f64,
    ) -> Result<LatentGrid, BackendError>;

    fn list_self_attention_sites(&self) -> Vec<AttentionSiteId> {
        self.capabilities().sites.clone()
    }
}

/// Pixel `[0,255]` to signal `[-1,1]`; 127.5 maps to 0.
#[inline]
pub fn pixel_to_signal(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_signal`], rounding and clamping to `[0,255]`.
#[inline]
pub fn signal_to_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Builds a backend from an id such as `mock`, `mock-zero` or `sd14:<weights>`.
pub fn open_backend(id: &str) -> Result<Box<dyn DenoiserBackend>, BackendError> {
    let id = id.trim();
    if let Some(cfg) = MockConfig::from_id(id) {
        return Ok(Box::new(MockBackend::new(cfg)));
    }
    if let Some(source) = id.strip_prefix("sd14:") {
        return open_checkpoint(&WeightSource::parse(source), None);
    }
    Err(BackendError::UnknownBackend(id.to_string()))
}
