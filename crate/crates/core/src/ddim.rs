//! Deterministic DDIM: noise schedules, inversion (clean latent to noise)
//! and sampling (noise back to a clean latent), both with `σ_t = 0`.
//!
//! Timesteps follow a uniform subsequence `0 = t_0 < t_1 < … < t_S = T` of
//! the backend's native schedule. Inversion evaluates the noise predictor at
//! the cleaner latent with the noisier step's timestep; sampling evaluates it
//! at the noisier latent. Both call the controller with `t_i`, so attention
//! captured while inverting lines up key-for-key with sampling.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{AttentionController, BackendError, DenoiserBackend, LatentGrid};

#[derive(Debug, Error)]
pub enum DdimError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("beta[{index}] = {value} is outside the open interval (0, 1)")]
    InvalidBeta { index: usize, value: f64 },
    #[error("explicit beta list has {actual} entries, expected {expected}")]
    BetaCount { expected: usize, actual: usize },
    #[error("cannot take {steps} sampling steps over a {native}-step schedule")]
    TooManySteps { steps: usize, native: usize },
    #[error("latent timestep tag is {actual}, expected {expected}")]
    TimestepTag { expected: usize, actual: usize },
    #[error("backend failed at t={timestep}: {source}")]
    Backend {
        timestep: usize,
        #[source]
        source: BackendError,
    },
    #[error("trajectory cache: {0}")]
    Cache(String),
}

/// How the per-step betas are generated.
#[derive(Clone, Debug, PartialEq)]
pub enum BetaSpec {
    Constant(f64),
    Linear { start: f64, end: f64 },
    /// Linear in `sqrt(beta)`, as used by Stable Diffusion.
    ScaledLinear { start: f64, end: f64 },
    Explicit(Vec<f64>),
}

/// Per-step `beta_t` for `t = 1..=T` and `alpha_bar_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, spec: &BetaSpec) -> Result<NoiseSchedule, DdimError> {
    if steps == 0 {
        return Err(DdimError::NoSteps);
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let betas: Vec<f64> = match spec {
        BetaSpec::Constant(b) => vec![*b; steps],
        BetaSpec::Linear { start, end } => (0..steps).map(|i| lerp(*start, *end, i)).collect(),
        BetaSpec::ScaledLinear { start, end } => (0..steps)
            .map(|i| lerp(start.sqrt(), end.sqrt(), i).powi(2))
            .collect(),
        BetaSpec::Explicit(v) => {
            if v.len() != steps {
                return Err(DdimError::BetaCount {
                    expected: steps,
                    actual: v.len(),
                });
            }
            v.clone()
        }
    };
    if let Some((index, &value)) = betas
        .iter()
        .enumerate()
        .find(|(_, &b)| !(b > 0.0 && b < 1.0))
    {
        return Err(DdimError::InvalidBeta { index, value });
    }
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    /// Native step count `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `betas()[t-1]` is `beta_t`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars()[t]` for `t = 0..=T`; index 0 is exactly 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// SHA-256 identifying a schedule together with its timestep subsequence.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScheduleHash(pub [u8; 32]);

impl fmt::Display for ScheduleHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ScheduleHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScheduleHash({})", &hex::encode(self.0)[..16])
    }
}

impl Serialize for ScheduleHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// A schedule plus the `S + 1` timesteps actually visited.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
}

impl SamplingPlan {
    /// `t_i = round(i·T/S)` for `i = 0..=S`; the last step lands on `T`.
    pub fn uniform(schedule: NoiseSchedule, steps: usize) -> Result<Self, DdimError> {
        let native = schedule.num_steps();
        if steps == 0 {
            return Err(DdimError::NoSteps);
        }
        if steps > native {
            return Err(DdimError::TooManySteps { steps, native });
        }
        let timesteps = (0..=steps)
            .map(|i| ((i * native) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self {
            schedule,
            timesteps,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `[0, t_1, …, t_S]`.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The timesteps at which the noise predictor runs: `[t_1, …, t_S]`.
    pub fn active_timesteps(&self) -> &[usize] {
        &self.timesteps[1..]
    }

    /// Number of DDIM steps `S`.
    pub fn num_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn final_timestep(&self) -> usize {
        *self.timesteps.last().expect("plan has at least two timesteps")
    }

    pub fn hash(&self) -> ScheduleHash {
        let mut h = Sha256::new();
        h.update(b"mixsa-schedule-v1");
        h.update((self.schedule.num_steps() as u64).to_le_bytes());
        for b in &self.schedule.betas {
            h.update(b.to_le_bytes());
        }
        h.update((self.timesteps.len() as u64).to_le_bytes());
        for t in &self.timesteps {
            h.update((*t as u64).to_le_bytes());
        }
        ScheduleHash(h.finalize().into())
    }
}

/// One deterministic step towards noise: from `z` at `ab_prev` to `ab_next`.
pub fn inversion_step(z: &Array3<f64>, eps: &Array3<f64>, ab_prev: f64, ab_next: f64) -> Array3<f64> {
    let scale = (ab_next / ab_prev).sqrt();
    let eps_coef = (1.0 - ab_next).sqrt() - scale * (1.0 - ab_prev).sqrt();
    ndarray::Zip::from(z)
        .and(eps)
        .map_collect(|&zv, &ev| scale * zv + eps_coef * ev)
}

/// One deterministic denoising step from `z` at `ab_cur` to `ab_prev`.
pub fn sampling_step(z: &Array3<f64>, eps: &Array3<f64>, ab_cur: f64, ab_prev: f64) -> Array3<f64> {
    let sqrt_cur = ab_cur.sqrt();
    let sqrt_one_minus_cur = (1.0 - ab_cur).sqrt();
    let sqrt_prev = ab_prev.sqrt();
    let sqrt_one_minus_prev = (1.0 - ab_prev).sqrt();
    ndarray::Zip::from(z).and(eps).map_collect(|&zv, &ev| {
        let x0 = (zv - sqrt_one_minus_cur * ev) / sqrt_cur;
        sqrt_prev * x0 + sqrt_one_minus_prev * ev
    })
}

/// Latents at every plan timestep, cleanest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    latents: Vec<LatentGrid>,
    timesteps: Vec<usize>,
}

impl Trajectory {
    pub fn latents(&self) -> &[LatentGrid] {
        &self.latents
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn start(&self) -> &LatentGrid {
        &self.latents[0]
    }

    /// `z_T`, the inverted noise latent.
    pub fn end(&self) -> &LatentGrid {
        self.latents.last().expect("trajectory is non-empty")
    }

    pub fn into_end(mut self) -> LatentGrid {
        self.latents.pop().expect("trajectory is non-empty")
    }

    /// Header: magic `MSTJ`, version, schedule hash, shape `(C,H,W)`, `S`, the
    /// `S+1` timesteps; then one little-endian `f32` plane per timestep.
    pub fn save_cache(&self, path: impl AsRef<Path>, schedule: &ScheduleHash) -> Result<(), DdimError> {
        let [c, h, w] = self.latents[0].shape();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"MSTJ");
        buf.push(1);
        buf.extend_from_slice(&schedule.0);
        for d in [c, h, w, self.timesteps.len() - 1] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in &self.timesteps {
            buf.extend_from_slice(&(*t as u32).to_le_bytes());
        }
        for z in &self.latents {
            for v in z.values.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        std::fs::File::create(path.as_ref())
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| DdimError::Cache(e.to_string()))
    }

    /// Reads a cache file, refusing it if it was built under another schedule.
    pub fn load_cache(path: impl AsRef<Path>, expected: &ScheduleHash) -> Result<Self, DdimError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DdimError::Cache(e.to_string()))?;
        let corrupt = |what: &str| DdimError::Cache(format!("corrupt header: {what}"));
        if bytes.len() < 4 + 1 + 32 + 16 || &bytes[..4] != b"MSTJ" {
            return Err(corrupt("bad magic or short file"));
        }
        if bytes[4] != 1 {
            return Err(corrupt("unsupported version"));
        }
        if bytes[5..37] != expected.0 {
            return Err(DdimError::Cache("schedule hash mismatch".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let (c, h, w, s) = (u32_at(37), u32_at(41), u32_at(45), u32_at(49));
        let mut off = 53;
        let plane = c * h * w;
        let need = off + (s + 1) * 4 + (s + 1) * plane * 4;
        if bytes.len() != need {
            return Err(corrupt("length does not match header"));
        }
        let timesteps: Vec<usize> = (0..=s).map(|i| u32_at(off + 4 * i)).collect();
        off += (s + 1) * 4;
        let latents = timesteps
            .iter()
            .map(|&t| {
                let vals: Vec<f64> = bytes[off..off + plane * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                off += plane * 4;
                LatentGrid::new(
                    Array3::from_shape_vec((c, h, w), vals).expect("plane size checked"),
                    t,
                )
            })
            .collect();
        Ok(Self { latents, timesteps })
    }
}

fn reborrow<'a>(c: &'a mut Option<&mut dyn AttentionController>) -> Option<&'a mut dyn AttentionController> {
    match c {
        Some(c) => Some(&mut **c),
        None => None,
    }
}

/// Runs the deterministic DDIM recurrence from `z0` up to `z_T`.
///
/// A capture controller, if given, sees every site at every active timestep.
pub fn invert(
    z0: &LatentGrid,
    backend: &mut dyn DenoiserBackend,
    plan: &SamplingPlan,
    mut controller: Option<&mut dyn AttentionController>,
    guidance_scale: f64,
) -> Result<Trajectory, DdimError> {
    if z0.timestep_tag != 0 {
        return Err(DdimError::TimestepTag {
            expected: 0,
            actual: z0.timestep_tag,
        });
    }
    let ts = plan.timesteps();
    let ab = plan.schedule().alpha_bars();
    let mut latents = Vec::with_capacity(ts.len());
    latents.push(z0.clone());
    for pair in ts.windows(2) {
        let (t_prev, t_next) = (pair[0], pair[1]);
        let current = latents.last().expect("seeded with z0");
        let eps = backend
            .predict_noise(current, t_next, reborrow(&mut controller), guidance_scale)
            .map_err(|source| DdimError::Backend {
                timestep: t_next,
                source,
            })?;
        let next = inversion_step(&current.values, &eps.values, ab[t_prev], ab[t_next]);
        latents.push(LatentGrid::new(next, t_next));
    }
    Ok(Trajectory {
        latents,
        timesteps: ts.to_vec(),
    })
}

/// Runs the deterministic DDIM recurrence from `z_T` down to a `z_0` estimate.
pub fn sample(
    z_t: &LatentGrid,
    backend: &mut dyn DenoiserBackend,
    plan: &SamplingPlan,
    mut controller: Option<&mut dyn AttentionController>,
    guidance_scale: f64,
) -> Result<LatentGrid, DdimError> {
    if z_t.timestep_tag != plan.final_timestep() {
        return Err(DdimError::TimestepTag {
            expected: plan.final_timestep(),
            actual: z_t.timestep_tag,
        });
    }
    let ts = plan.timesteps();
    let ab = plan.schedule().alpha_bars();
    let mut z = z_t.clone();
    for pair in ts.windows(2).rev() {
        let (t_prev, t_cur) = (pair[0], pair[1]);
        let eps = backend
            .predict_noise(&z, t_cur, reborrow(&mut controller), guidance_scale)
            .map_err(|source| DdimError::Backend {
                timestep: t_cur,
                source,
            })?;
        z = LatentGrid::new(
            sampling_step(&z.values, &eps.values, ab[t_cur], ab[t_prev]),
            t_prev,
        );
    }
    Ok(z)
}
