//! Adapter slot for pretrained Stable Diffusion v1.4 weights.
//!
//! The weight source is resolved and validated here. Running the real U-Net
//! needs a tensor runtime that this build does not link, so opening a
//! checkpoint reports [`BackendError::Unavailable`] after validation.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{AttentionSiteId, BackendError, Capabilities, DenoiserBackend, Stage};
use crate::ddim::{make_schedule, BetaSpec, NoiseSchedule};

/// Where checkpoint weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum WeightSource {
    Path(PathBuf),
    /// `organization/name` style model-hub identifier.
    Hub(String),
}

impl WeightSource {
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        let looks_like_hub = !Path::new(s).exists()
            && !s.starts_with('/')
            && !s.starts_with('.')
            && s.split('/').count() == 2
            && s
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '/'));
        if looks_like_hub {
            WeightSource::Hub(s.to_string())
        } else {
            WeightSource::Path(PathBuf::from(s))
        }
    }
}

/// Self-attention layout of the v1.4 U-Net: six down-block transformers,
/// one in the middle block, nine in the up blocks.
pub fn sd14_sites() -> Vec<AttentionSiteId> {
    (0..16)
        .map(|index| AttentionSiteId {
            index,
            stage: match index {
                0..=5 => Stage::Encoder,
                6 => Stage::Middle,
                _ => Stage::Decoder,
            },
        })
        .collect()
}

pub fn sd14_capabilities() -> Capabilities {
    Capabilities {
        id: "sd14".into(),
        downsample_factor: 8,
        latent_channels: 4,
        sites: sd14_sites(),
        supports_guidance: true,
    }
}

/// Scaled-linear betas from 0.00085 to 0.012 over 1000 training steps.
pub fn sd14_schedule() -> NoiseSchedule {
    make_schedule(
        1000,
        &BetaSpec::ScaledLinear {
            start: 0.00085,
            end: 0.012,
        },
    )
    .expect("stable diffusion schedule is valid")
}

/// Resolves the main weights and the optional black-and-white fine-tune.
pub fn open_checkpoint(
    weights: &WeightSource,
    bw_finetune: Option<&WeightSource>,
) -> Result<Box<dyn DenoiserBackend>, BackendError> {
    for source in std::iter::once(weights).chain(bw_finetune) {
        if let WeightSource::Path(p) = source {
            if !p.exists() {
                return Err(BackendError::Unavailable(format!(
                    "checkpoint weights not found at {}",
                    p.display()
                )));
            }
        }
    }
    Err(BackendError::Unavailable(format!(
        "{weights:?}: this build has no tensor runtime for v1.4 checkpoints; use --backend mock"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_source_parsing() {
        assert_eq!(
            WeightSource::parse("CompVis/stable-diffusion-v1-4"),
            WeightSource::Hub("CompVis/stable-diffusion-v1-4".into())
        );
        assert_eq!(
            WeightSource::parse("/models/sd-v1-4.ckpt"),
            WeightSource::Path("/models/sd-v1-4.ckpt".into())
        );
        assert_eq!(
            WeightSource::parse("./sd.ckpt"),
            WeightSource::Path("./sd.ckpt".into())
        );
    }

    #[test]
    fn sd14_topology_has_decoder_sites() {
        let caps = sd14_capabilities();
        assert_eq!(caps.sites.len(), 16);
        assert!(caps.sites.iter().any(|s| s.stage == Stage::Decoder));
        assert_eq!(caps.sites[10].stage, Stage::Decoder);
        assert_eq!(caps.sites[11].stage, Stage::Decoder);
    }

    #[test]
    fn sd14_schedule_endpoints() {
        let s = sd14_schedule();
        assert_eq!(s.num_steps(), 1000);
        assert!((s.betas()[0] - 0.00085).abs() < 1e-12);
        assert!((s.betas()[999] - 0.012).abs() < 1e-12);
    }
}
