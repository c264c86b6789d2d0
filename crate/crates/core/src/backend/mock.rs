//! Deterministic weight-free backends.
//!
//! The mock "U-Net" is a stack of genuine softmax self-attention sites over
//! box-pooled token grids with fixed pseudo-random projections, arranged like
//! the v1.4 layout (encoder, middle, decoder). Each site adds its projected
//! attention output back onto the running feature map. The noise prediction
//! is then read off according to [`MockDenoiser`].

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    pixel_to_signal, signal_to_pixel, AttentionController, AttentionOverride, AttentionSiteId,
    BackendError, Capabilities, DenoiserBackend, LatentGrid, Qkv, Stage,
};
use crate::ddim::NoiseSchedule;
use crate::image::ImageBuffer;
use crate::mixer::softmax_attention;

/// How the prediction is formed from the site stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum MockDenoiser {
    /// ε ≡ 0. Sites still run so controllers are exercised.
    Zero,
    /// ε = coefficient · z.
    Linear { coefficient: f64 },
    /// ε = gain · (accumulated attention residual).
    Echo { gain: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum MockAutoencoder {
    /// Latent = signal-space pixels, downsampling factor 1.
    Identity,
    /// Block-average encoder, nearest-neighbour decoder.
    Box { factor: u32 },
}

#[derive(Clone, Debug, Serialize)]
pub struct MockConfig {
    pub denoiser: MockDenoiser,
    pub autoencoder: MockAutoencoder,
    pub num_sites: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Token grid side at the finest level; coarser levels halve it.
    pub token_side: usize,
    pub residual_scale: f64,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            denoiser: MockDenoiser::Echo { gain: 1.0 },
            autoencoder: MockAutoencoder::Box { factor: 8 },
            num_sites: 16,
            heads: 2,
            head_dim: 8,
            token_side: 16,
            residual_scale: 0.05,
            seed: 0x5eed_1234,
        }
    }
}

impl MockConfig {
    pub fn zero_identity() -> Self {
        Self {
            denoiser: MockDenoiser::Zero,
            autoencoder: MockAutoencoder::Identity,
            ..Self::default()
        }
    }

    pub fn echo_identity() -> Self {
        Self {
            autoencoder: MockAutoencoder::Identity,
            ..Self::default()
        }
    }

    pub fn linear_identity(coefficient: f64) -> Self {
        Self {
            denoiser: MockDenoiser::Linear { coefficient },
            autoencoder: MockAutoencoder::Identity,
            ..Self::default()
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "mock" | "mock-echo" => Some(Self::default()),
            "mock-zero" => Some(Self::zero_identity()),
            "mock-identity" => Some(Self::echo_identity()),
            "mock-linear" => Some(Self::linear_identity(0.1)),
            _ => None,
        }
    }

    fn id(&self) -> String {
        let den = match self.denoiser {
            MockDenoiser::Zero => "zero".to_string(),
            MockDenoiser::Linear { coefficient } => format!("linear({coefficient})"),
            MockDenoiser::Echo { gain } => format!("echo({gain})"),
        };
        let ae = match self.autoencoder {
            MockAutoencoder::Identity => "identity".to_string(),
            MockAutoencoder::Box { factor } => format!("box{factor}"),
        };
        format!("mock[{den},{ae},sites={}]", self.num_sites)
    }
}

struct MockSite {
    id: AttentionSiteId,
    level: u32,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

pub struct MockBackend {
    config: MockConfig,
    caps: Capabilities,
    sites: Vec<MockSite>,
    schedule: NoiseSchedule,
    guidance_notice_logged: bool,
}

const LATENT_CHANNELS: usize = 3;

fn site_layout(n: usize) -> Vec<(Stage, u32)> {
    let n_enc = n * 6 / 16;
    let n_mid = usize::from(n >= 3);
    let n_dec = n - n_enc - n_mid;
    let mut out = Vec::with_capacity(n);
    for i in 0..n_enc {
        out.push((Stage::Encoder, (i / 2).min(2) as u32));
    }
    if n_mid == 1 {
        out.push((Stage::Middle, 3));
    }
    for j in 0..n_dec {
        out.push((Stage::Decoder, 2 - (j * 3 / n_dec.max(1)).min(2) as u32));
    }
    out
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        let hd = config.heads * config.head_dim;
        let sites: Vec<MockSite> = site_layout(config.num_sites)
            .into_iter()
            .enumerate()
            .map(|(index, (stage, level))| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (index as u64).wrapping_mul(0x9e37_79b9));
                let in_scale = 1.0 / (LATENT_CHANNELS as f64).sqrt();
                let out_scale = 1.0 / (hd as f64).sqrt();
                MockSite {
                    id: AttentionSiteId { index, stage },
                    level,
                    wq: random_matrix(&mut rng, LATENT_CHANNELS, hd, in_scale),
                    wk: random_matrix(&mut rng, LATENT_CHANNELS, hd, in_scale),
                    wv: random_matrix(&mut rng, LATENT_CHANNELS, hd, in_scale),
                    wo: random_matrix(&mut rng, hd, LATENT_CHANNELS, out_scale),
                }
            })
            .collect();
        let caps = Capabilities {
            id: config.id(),
            downsample_factor: match config.autoencoder {
                MockAutoencoder::Identity => 1,
                MockAutoencoder::Box { factor } => factor,
            },
            latent_channels: LATENT_CHANNELS,
            sites: sites.iter().map(|s| s.id).collect(),
            supports_guidance: false,
        };
        Self {
            config,
            caps,
            sites,
            schedule: super::checkpoint::sd14_schedule(),
            guidance_notice_logged: false,
        }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn token_grid(&self, level: u32, h: usize, w: usize) -> (usize, usize) {
        let side = (self.config.token_side >> level).max(1);
        (side.min(h), side.min(w))
    }

    fn split_heads(&self, x: &Array2<f64>) -> Array3<f64> {
        let tokens = x.nrows();
        let (heads, dim) = (self.config.heads, self.config.head_dim);
        Array3::from_shape_fn((heads, tokens, dim), |(hh, t, d)| x[[t, hh * dim + d]])
    }

    fn merge_heads(&self, x: &Array3<f64>) -> Array2<f64> {
        let (heads, tokens, dim) = x.dim();
        Array2::from_shape_fn((tokens, heads * dim), |(t, j)| x[[j / dim, t, j % dim]])
    }
}

/// Box-average `feat` (C×H×W) onto a th×tw grid; returns tokens × C.
fn pool(feat: &Array3<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (c, h, w) = feat.dim();
    let mut sums = Array2::<f64>::zeros((th * tw, c));
    let mut counts = vec![0usize; th * tw];
    for y in 0..h {
        let ty = y * th / h;
        for x in 0..w {
            let tok = ty * tw + x * tw / w;
            counts[tok] += 1;
            for ch in 0..c {
                sums[[tok, ch]] += feat[[ch, y, x]];
            }
        }
    }
    for (tok, &n) in counts.iter().enumerate() {
        sums.row_mut(tok).mapv_inplace(|v| v / n as f64);
    }
    sums
}

/// Normalizes each channel over the token grid, one group per channel.
fn group_norm(tokens: &mut Array2<f64>) {
    for mut col in tokens.columns_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        col.mapv_inplace(|v| (v - mean) * inv);
    }
}

impl DenoiserBackend for MockBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn native_schedule(&self) -> NoiseSchedule {
        self.schedule.clone()
    }

    fn encode_image(&self, img: &ImageBuffer) -> Result<LatentGrid, BackendError> {
        let f = self.caps.downsample_factor;
        if img.width() % f != 0 || img.height() % f != 0 {
            return Err(BackendError::DimensionMismatch {
                width: img.width(),
                height: img.height(),
                factor: f,
            });
        }
        let rgb = img.to_rgb();
        let (w, h, f) = (img.width() as usize, img.height() as usize, f as usize);
        let (lh, lw) = (h / f, w / f);
        let area = (f * f) as f64;
        let values = Array3::from_shape_fn((LATENT_CHANNELS, lh, lw), |(c, ly, lx)| {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += pixel_to_signal(rgb.get((lx * f + dx) as u32, (ly * f + dy) as u32, c as u8));
                }
            }
            acc / area
        });
        Ok(LatentGrid::new(values, 0))
    }

    fn decode_latent(&self, z: &LatentGrid) -> Result<ImageBuffer, BackendError> {
        if !z.is_finite() {
            return Err(BackendError::NonFinite);
        }
        let [c, lh, lw] = z.shape();
        if c != LATENT_CHANNELS {
            return Err(BackendError::LatentShape {
                expected: format!("({LATENT_CHANNELS}, H/f, W/f)"),
                actual: vec![c, lh, lw],
            });
        }
        let f = self.caps.downsample_factor as usize;
        let (h, w) = (lh * f, lw * f);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data.push(signal_to_pixel(z.values[[ch, y / f, x / f]]));
                }
            }
        }
        Ok(ImageBuffer::new_rgb(w as u32, h as u32, data).expect("decoder buffer sized exactly"))
    }

    fn predict_noise(
        &mut self,
        z: &LatentGrid,
        t: usize,
        mut controller: Option<&mut dyn AttentionController>,
        guidance_scale: f64,
    ) -> Result<LatentGrid, BackendError> {
        let max_t = self.schedule.num_steps();
        if t == 0 || t > max_t {
            return Err(BackendError::Timestep { t, max: max_t });
        }
        let [c, h, w] = z.shape();
        if c != LATENT_CHANNELS {
            return Err(BackendError::LatentShape {
                expected: format!("({LATENT_CHANNELS}, H/f, W/f)"),
                actual: vec![c, h, w],
            });
        }
        if !z.is_finite() {
            return Err(BackendError::NonFinite);
        }
        if guidance_scale != 1.0 && !self.guidance_notice_logged {
            log::info!(
                "{}: no text pathway, guidance scale {guidance_scale} ignored",
                self.caps.id
            );
            self.guidance_notice_logged = true;
        }

        let mut feat = z.values.clone();
        for site in &self.sites {
            let (th, tw) = self.token_grid(site.level, h, w);
            let mut tokens = pool(&feat, th, tw);
            group_norm(&mut tokens);
            for ((_, ch), v) in tokens.indexed_iter_mut() {
                *v += 0.1 * ((t as f64 + 1.0) * 0.013 * (ch as f64 + 1.0) + site.id.index as f64).sin();
            }
            let qkv = Qkv {
                q: self.split_heads(&tokens.dot(&site.wq)),
                k: self.split_heads(&tokens.dot(&site.wk)),
                v: self.split_heads(&tokens.dot(&site.wv)),
            };
            let expected_out = qkv.q.dim();
            let scale = 1.0 / (self.config.head_dim as f64).sqrt();
            let attn = match controller.as_deref_mut() {
                None => softmax_attention(&qkv.q.view(), &qkv.k.view(), &qkv.v.view(), scale),
                Some(ctrl) => match ctrl.intercept(site.id, t, qkv) {
                    Ok(AttentionOverride::Replace(r)) => {
                        softmax_attention(&r.q.view(), &r.k.view(), &r.v.view(), scale)
                    }
                    Ok(AttentionOverride::Output(o)) => o,
                    Err(e) => {
                        return Err(BackendError::Controller {
                            site: site.id,
                            timestep: t,
                            message: e.0,
                        })
                    }
                },
            };
            if attn.dim() != expected_out {
                return Err(BackendError::Controller {
                    site: site.id,
                    timestep: t,
                    message: format!(
                        "attention output shape {:?} differs from expected {:?}",
                        attn.dim(),
                        expected_out
                    ),
                });
            }
            let out = self.merge_heads(&attn).dot(&site.wo);
            let rs = self.config.residual_scale;
            for y in 0..h {
                let ty = y * th / h;
                for x in 0..w {
                    let tok = ty * tw + x * tw / w;
                    for ch in 0..c {
                        feat[[ch, y, x]] += rs * out[[tok, ch]];
                    }
                }
            }
        }

        let eps = match self.config.denoiser {
            MockDenoiser::Zero => Array3::zeros((c, h, w)),
            MockDenoiser::Linear { coefficient } => z.values.mapv(|v| coefficient * v),
            MockDenoiser::Echo { gain } => (feat - &z.values).mapv(|v| gain * v),
        };
        Ok(LatentGrid::new(eps, z.timestep_tag))
    }
}

/// Latent-only backend with `ε = coefficient · z` for any channel count and
/// no attention sites. It has no autoencoder.
pub struct ScalarLinearBackend {
    coefficient: f64,
    caps: Capabilities,
    schedule: NoiseSchedule,
}

impl ScalarLinearBackend {
    pub fn new(coefficient: f64, channels: usize) -> Self {
        Self {
            coefficient,
            caps: Capabilities {
                id: format!("scalar-linear({coefficient})"),
                downsample_factor: 1,
                latent_channels: channels,
                sites: Vec::new(),
                supports_guidance: false,
            },
            schedule: super::checkpoint::sd14_schedule(),
        }
    }
}

impl DenoiserBackend for ScalarLinearBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn native_schedule(&self) -> NoiseSchedule {
        self.schedule.clone()
    }

    fn encode_image(&self, _: &ImageBuffer) -> Result<LatentGrid, BackendError> {
        Err(BackendError::Unavailable(format!("{} has no autoencoder", self.caps.id)))
    }

    fn decode_latent(&self, _: &LatentGrid) -> Result<ImageBuffer, BackendError> {
        Err(BackendError::Unavailable(format!("{} has no autoencoder", self.caps.id)))
    }

    fn predict_noise(
        &mut self,
        z: &LatentGrid,
        t: usize,
        _controller: Option<&mut dyn AttentionController>,
        _guidance_scale: f64,
    ) -> Result<LatentGrid, BackendError> {
        let max = self.schedule.num_steps();
        if t == 0 || t > max {
            return Err(BackendError::Timestep { t, max });
        }
        if z.shape()[0] != self.caps.latent_channels {
            return Err(BackendError::LatentShape {
                expected: format!("({}, H, W)", self.caps.latent_channels),
                actual: z.shape().to_vec(),
            });
        }
        Ok(LatentGrid::new(z.values.mapv(|v| self.coefficient * v), t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::IdentityController;

    fn rgb_fixture(w: u32, h: u32) -> ImageBuffer {
        ImageBuffer::from_fn_rgb(w, h, |x, y| [(x * 13 + y * 7) as u8, (x * y) as u8, 200 - (x + y) as u8])
    }

    struct Counter(usize);
    impl AttentionController for Counter {
        fn intercept(
            &mut self,
            _site: AttentionSiteId,
            _t: usize,
            qkv: Qkv,
        ) -> Result<AttentionOverride, super::super::ControllerError> {
            self.0 += 1;
            Ok(AttentionOverride::Replace(qkv))
        }
    }

    struct ZeroV;
    impl AttentionController for ZeroV {
        fn intercept(
            &mut self,
            _site: AttentionSiteId,
            _t: usize,
            mut qkv: Qkv,
        ) -> Result<AttentionOverride, super::super::ControllerError> {
            qkv.v.fill(0.0);
            Ok(AttentionOverride::Replace(qkv))
        }
    }

    struct Failing;
    impl AttentionController for Failing {
        fn intercept(
            &mut self,
            site: AttentionSiteId,
            _t: usize,
            qkv: Qkv,
        ) -> Result<AttentionOverride, super::super::ControllerError> {
            if site.index == 3 {
                Err(super::super::ControllerError("boom".into()))
            } else {
                Ok(AttentionOverride::Replace(qkv))
            }
        }
    }

    #[test]
    fn identity_autoencoder_round_trip_is_exact() {
        let be = MockBackend::new(MockConfig::zero_identity());
        let img = rgb_fixture(16, 12);
        let z = be.encode_image(&img).unwrap();
        assert_eq!(z.shape(), [3, 12, 16]);
        assert_eq!(z.timestep_tag, 0);
        assert!((z.values[[0, 0, 1]] - (13.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert_eq!(be.decode_latent(&z).unwrap(), img);
    }

    #[test]
    fn zero_latent_decodes_mid_gray() {
        let be = MockBackend::new(MockConfig::zero_identity());
        let img = be
            .decode_latent(&LatentGrid::new(Array3::zeros((3, 4, 4)), 0))
            .unwrap();
        assert!(img.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn non_finite_latent_is_rejected() {
        let be = MockBackend::new(MockConfig::zero_identity());
        let mut values = Array3::zeros((3, 2, 2));
        values[[1, 1, 0]] = f64::NAN;
        assert!(matches!(
            be.decode_latent(&LatentGrid::new(values, 0)),
            Err(BackendError::NonFinite)
        ));
    }

    #[test]
    fn box_encoder_rejects_indivisible_sizes() {
        let be = MockBackend::new(MockConfig::default());
        let img = ImageBuffer::filled_rgb(513, 512, [1, 2, 3]);
        assert!(matches!(
            be.encode_image(&img),
            Err(BackendError::DimensionMismatch { width: 513, factor: 8, .. })
        ));
        let ok = be.encode_image(&ImageBuffer::filled_rgb(64, 32, [1, 2, 3])).unwrap();
        assert_eq!(ok.shape(), [3, 4, 8]);
    }

    #[test]
    fn zero_denoiser_predicts_zero() {
        let mut be = MockBackend::new(MockConfig::zero_identity());
        let z = be.encode_image(&rgb_fixture(16, 16)).unwrap();
        let eps = be.predict_noise(&z, 500, None, 7.5).unwrap();
        assert!(eps.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_sites_enumerate_in_order() {
        let be = MockBackend::new(MockConfig::default());
        let sites = be.list_self_attention_sites();
        assert_eq!(sites.iter().map(|s| s.index).collect::<Vec<_>>(), (0..16).collect::<Vec<_>>());
        assert_eq!(sites.iter().filter(|s| s.stage == Stage::Encoder).count(), 6);
        assert_eq!(sites[6].stage, Stage::Middle);
        assert!(sites[7..].iter().all(|s| s.stage == Stage::Decoder));
    }

    #[test]
    fn controller_called_once_per_site() {
        let mut be = MockBackend::new(MockConfig {
            num_sites: 2,
            ..MockConfig::echo_identity()
        });
        let z = be.encode_image(&rgb_fixture(16, 16)).unwrap();
        let mut counter = Counter(0);
        be.predict_noise(&z, 10, Some(&mut counter), 1.0).unwrap();
        assert_eq!(counter.0, 2);
    }

    #[test]
    fn identity_controller_is_neutral_and_deterministic() {
        let mut be = MockBackend::new(MockConfig::echo_identity());
        let z = be.encode_image(&rgb_fixture(16, 16)).unwrap();
        let plain = be.predict_noise(&z, 321, None, 7.5).unwrap();
        let again = be.predict_noise(&z, 321, None, 7.5).unwrap();
        let hooked = be.predict_noise(&z, 321, Some(&mut IdentityController), 7.5).unwrap();
        assert_eq!(plain, again);
        assert_eq!(plain, hooked);
        assert_eq!(plain.shape(), z.shape());
        assert!(plain.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zeroed_values_remove_attention_contribution() {
        let mut be = MockBackend::new(MockConfig::echo_identity());
        let z = be.encode_image(&rgb_fixture(16, 16)).unwrap();
        let z2 = be.encode_image(&rgb_fixture(16, 16).inverted()).unwrap();
        let original = be.predict_noise(&z, 40, None, 1.0).unwrap();
        let zeroed = be.predict_noise(&z, 40, Some(&mut ZeroV), 1.0).unwrap();
        let zeroed_other = be.predict_noise(&z2, 40, Some(&mut ZeroV), 1.0).unwrap();
        assert_ne!(original, zeroed);
        // with V ≡ 0 every site output vanishes, whatever V would have been
        assert!(zeroed.values.iter().all(|&v| v == 0.0));
        assert_eq!(zeroed.values, zeroed_other.values);
    }

    #[test]
    fn controller_errors_carry_site_context() {
        let mut be = MockBackend::new(MockConfig::echo_identity());
        let z = be.encode_image(&rgb_fixture(8, 8)).unwrap();
        let err = be.predict_noise(&z, 7, Some(&mut Failing), 1.0).unwrap_err();
        match err {
            BackendError::Controller { site, timestep, message } => {
                assert_eq!(site.index, 3);
                assert_eq!(timestep, 7);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn timestep_zero_is_rejected() {
        let mut be = MockBackend::new(MockConfig::zero_identity());
        let z = be.encode_image(&rgb_fixture(4, 4)).unwrap();
        assert!(matches!(
            be.predict_noise(&z, 0, None, 1.0),
            Err(BackendError::Timestep { t: 0, .. })
        ));
    }
}
