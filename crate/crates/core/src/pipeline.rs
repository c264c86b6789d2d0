//! End-to-end sketch extraction: contour map, three captured inversions,
//! mixed-attention generation from the contour latent, post-processing.
//!
//! [`Engine::prepare`] does everything up to the banks; [`Engine::generate`]
//! runs one sampling pass over prepared banks. A single job is exactly
//! `prepare` followed by `generate`, which is what makes grid cells equal
//! standalone runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attnbank::{AttentionBank, BankError, BankMeta, BankSet, BankSource, CaptureController};
use crate::backend::{AttentionController, AttentionSiteId, BackendError, DenoiserBackend, LatentGrid};
use crate::contour::{ContourError, ContourParams, DetectorRegistry};
use crate::ddim::{invert, sample, DdimError, SamplingPlan, ScheduleHash};
use crate::image::{ImageBuffer, ImageError};
use crate::metrics::{evaluate, EvalItem, FeatureExtractor, Metric, MetricReport};
use crate::mixer::{make_controller, AttentionDump, MixError, MixParams, MixToggles};
use crate::rcd::{reconstruct, RcdError, RcdParams};
use crate::scene::{composite_on_white, SaliencyRegistry, SceneError};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_RESOLUTION: u32 = 512;
pub const FALLBACK_METHOD: &str = "canny";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("preprocess: {0}")]
    Image(#[from] ImageError),
    #[error("foreground: {0}")]
    Foreground(#[from] SceneError),
    #[error("contour: {0}")]
    Contour(#[from] ContourError),
    #[error("mix params: {0}")]
    Mix(#[from] MixError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("inversion of {which:?} image: {source}")]
    Inversion {
        which: BankSource,
        #[source]
        source: DdimError,
    },
    #[error("bank: {0}")]
    Bank(#[from] BankError),
    #[error("sampling: {0}")]
    Sampling(#[source] DdimError),
    #[error("post-processing: {0}")]
    Rcd(#[from] RcdError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

/// Components of the method that can be switched off independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Start from an edge map; when off the colour image itself is inverted
    /// as the initial sketch.
    pub initial_contour: bool,
    /// Mixed attention during sampling; when off sampling runs uncontrolled.
    pub msa: bool,
    /// Colour/contour query decomposition; when off β is forced to 0.
    pub dct: bool,
    /// Post-processing of the decoded sketch.
    pub rcd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            initial_contour: true,
            msa: true,
            dct: true,
            rcd: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Foreground {
    Off,
    Adapter { name: String, hard: bool },
}

/// Everything except the images, in a form that can be echoed and hashed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobParams {
    pub mix: MixParams,
    pub contour: ContourParams,
    pub rcd: RcdParams,
    pub foreground: Foreground,
    pub ablation: Ablation,
    pub seed: u64,
    pub backend: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub resolution: u32,
    /// Fail instead of falling back when an optional adapter is missing.
    pub strict: bool,
    /// Bank every attention site rather than only the targets.
    pub bank_all_sites: bool,
}

impl Default for JobParams {
    fn default() -> Self {
        Self {
            mix: MixParams::default(),
            contour: ContourParams::default(),
            rcd: RcdParams::default(),
            foreground: Foreground::Off,
            ablation: Ablation::default(),
            seed: 0,
            backend: "mock".into(),
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            resolution: DEFAULT_RESOLUTION,
            strict: false,
            bank_all_sites: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SketchJob {
    pub color: ImageBuffer,
    pub reference: ImageBuffer,
    pub params: JobParams,
}

/// Canonical, hashable description of a job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub color_sha256: String,
    pub reference_sha256: String,
    pub params: JobParams,
}

impl JobDescriptor {
    pub fn of(job: &SketchJob) -> Self {
        Self {
            color_sha256: hex::encode(job.color.content_hash()),
            reference_sha256: hex::encode(job.reference.content_hash()),
            params: job.params.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    /// SHA-256 of [`Self::to_json`], hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub preprocess_ms: f64,
    pub invert_ms: f64,
    pub sample_ms: f64,
    pub postprocess_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub descriptor: JobDescriptor,
    pub descriptor_sha256: String,
    pub backend_id: String,
    pub schedule_hash: ScheduleHash,
    pub timesteps: Vec<usize>,
    pub contour_method_used: String,
    pub foreground_used: Option<String>,
    pub banked_sites: Vec<AttentionSiteId>,
    /// Reference, colour, contour.
    pub bank_sha256: [String; 3],
    pub notices: Vec<String>,
    pub timings: Timings,
    pub version: String,
}

#[derive(Clone, Debug)]
pub struct SketchResult {
    pub sketch: ImageBuffer,
    pub contour: ImageBuffer,
    pub pre_rcd: ImageBuffer,
    pub dumps: Option<Vec<AttentionDump>>,
    pub provenance: Provenance,
}

/// Banks and start latent shared by every generation from one input pair.
pub struct PreparedJob {
    pub params: JobParams,
    pub descriptor: JobDescriptor,
    pub plan: SamplingPlan,
    pub banks: BankSet,
    pub contour_latent: LatentGrid,
    pub contour: ImageBuffer,
    pub contour_method_used: String,
    pub foreground_used: Option<String>,
    pub banked_sites: Vec<AttentionSiteId>,
    pub notices: Vec<String>,
    pub timings: Timings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Samples from `z_T` under the mixing controller and decodes.
///
/// Refuses banks built under a different schedule and banks missing any
/// target-site entry.
pub fn generate_from_banks(
    backend: &mut dyn DenoiserBackend,
    banks: &BankSet,
    z_t: &LatentGrid,
    plan: &SamplingPlan,
    mix: &MixParams,
    ablation: Ablation,
    guidance_scale: f64,
    record_dump: bool,
) -> Result<(ImageBuffer, Option<Vec<AttentionDump>>), PipelineError> {
    banks.verify_schedule(&plan.hash())?;
    let sites = backend.list_self_attention_sites();
    mix.validate_sites(&sites)?;
    let targets: Vec<AttentionSiteId> = sites
        .iter()
        .copied()
        .filter(|s| mix.target_sites.contains(&s.index))
        .collect();
    let (z0, dumps) = if ablation.msa {
        banks.validate(plan.active_timesteps(), &targets)?;
        let mut ctrl = make_controller(
            banks,
            mix,
            MixToggles {
                decompose_texture: ablation.dct,
            },
            record_dump,
        );
        let z0 = sample(z_t, backend, plan, Some(&mut ctrl as &mut dyn AttentionController), guidance_scale)
            .map_err(PipelineError::Sampling)?;
        (z0, ctrl.into_dumps())
    } else {
        let z0 = sample(z_t, backend, plan, None, guidance_scale).map_err(PipelineError::Sampling)?;
        (z0, None)
    };
    Ok((backend.decode_latent(&z0)?, dumps))
}

/// Owns a backend plus adapter registries and counts inversions.
pub struct Engine {
    backend: Box<dyn DenoiserBackend>,
    detectors: DetectorRegistry,
    saliency: SaliencyRegistry,
    inversions: usize,
    record_dumps: bool,
}

impl Engine {
    pub fn new(backend: Box<dyn DenoiserBackend>) -> Self {
        Self::with_registries(backend, DetectorRegistry::default(), SaliencyRegistry::default())
    }

    pub fn with_registries(
        backend: Box<dyn DenoiserBackend>,
        detectors: DetectorRegistry,
        saliency: SaliencyRegistry,
    ) -> Self {
        Self {
            backend,
            detectors,
            saliency,
            inversions: 0,
            record_dumps: false,
        }
    }

    /// Keep target-site attention outputs in each result.
    pub fn record_dumps(&mut self, on: bool) {
        self.record_dumps = on;
    }

    pub fn inversion_count(&self) -> usize {
        self.inversions
    }

    pub fn backend(&self) -> &dyn DenoiserBackend {
        self.backend.as_ref()
    }

    pub fn backend_mut(&mut self) -> &mut dyn DenoiserBackend {
        self.backend.as_mut()
    }

    pub fn detectors(&self) -> &DetectorRegistry {
        &self.detectors
    }

    pub fn saliency(&self) -> &SaliencyRegistry {
        &self.saliency
    }

    fn invert_capture(
        &mut self,
        which: BankSource,
        image: &ImageBuffer,
        plan: &SamplingPlan,
        sites: &[AttentionSiteId],
        guidance_scale: f64,
    ) -> Result<(AttentionBank, LatentGrid), PipelineError> {
        let z0 = self.backend.encode_image(image)?;
        let mut bank = AttentionBank::new(BankMeta {
            schedule_hash: plan.hash(),
            sites: sites.to_vec(),
            source_hash: image.content_hash(),
        });
        let filter = sites.iter().map(|s| s.index).collect();
        let traj = {
            let mut cap = CaptureController::new(&mut bank, which, which.captured_kinds(), Some(filter));
            invert(&z0, self.backend.as_mut(), plan, Some(&mut cap as &mut dyn AttentionController), guidance_scale)
                .map_err(|source| PipelineError::Inversion { which, source })?
        };
        self.inversions += 1;
        Ok((bank, traj.into_end()))
    }

    /// Preprocessing, contour extraction and the three captured inversions.
    pub fn prepare(&mut self, job: &SketchJob) -> Result<PreparedJob, PipelineError> {
        let p = &job.params;
        let mut notices = Vec::new();
        let mut timings = Timings::default();
        let started = Instant::now();

        let caps = self.backend.capabilities().clone();
        let f = caps.downsample_factor;
        if p.resolution == 0 || p.resolution % f != 0 {
            return Err(PipelineError::InvalidJob(format!(
                "resolution {} is not a positive multiple of the backend downsampling factor {f}",
                p.resolution
            )));
        }
        p.rcd.validate()?;
        p.contour.validate()?;
        let mix = p.mix.clone().clamped();
        mix.validate_sites(&caps.sites)?;

        let mut color = job.color.center_square(p.resolution);
        let reference = job.reference.center_square(p.resolution);

        let foreground_used = match &p.foreground {
            Foreground::Off => None,
            Foreground::Adapter { name, hard } => {
                if self.saliency.contains(name) || p.strict {
                    let mask = self.saliency.mask(name, &color)?;
                    color = composite_on_white(&color, &mask, *hard)?;
                    Some(name.clone())
                } else {
                    let msg = format!("saliency adapter `{name}` unavailable; continuing without foreground masking");
                    log::warn!("{msg}");
                    notices.push(msg);
                    None
                }
            }
        };

        let (contour, contour_method_used) = if p.ablation.initial_contour {
            let mut cp = p.contour.clone();
            if !self.detectors.contains(&cp.method) && !p.strict {
                let msg = format!(
                    "contour method `{}` unavailable; falling back to built-in {FALLBACK_METHOD}",
                    cp.method
                );
                log::warn!("{msg}");
                notices.push(msg);
                cp.method = FALLBACK_METHOD.into();
            }
            let c = self.detectors.extract_contours(&color, &cp)?;
            (c, cp.method)
        } else {
            (color.to_gray(), "none".to_string())
        };
        timings.preprocess_ms = ms(started);

        let plan = SamplingPlan::uniform(self.backend.native_schedule(), p.steps)
            .map_err(|e| PipelineError::InvalidJob(e.to_string()))?;
        let banked_sites: Vec<AttentionSiteId> = if p.bank_all_sites {
            caps.sites.clone()
        } else {
            caps.sites
                .iter()
                .copied()
                .filter(|s| mix.target_sites.contains(&s.index))
                .collect()
        };

        let t = Instant::now();
        let (reference_bank, _) =
            self.invert_capture(BankSource::Reference, &reference, &plan, &banked_sites, p.guidance_scale)?;
        let (color_bank, _) = self.invert_capture(BankSource::Color, &color, &plan, &banked_sites, p.guidance_scale)?;
        let (contour_bank, contour_latent) =
            self.invert_capture(BankSource::Contour, &contour, &plan, &banked_sites, p.guidance_scale)?;
        timings.invert_ms = ms(t);

        let banks = BankSet {
            reference: reference_bank,
            color: color_bank,
            contour: contour_bank,
        };
        let targets: Vec<AttentionSiteId> = banked_sites
            .iter()
            .copied()
            .filter(|s| mix.target_sites.contains(&s.index))
            .collect();
        banks.validate(plan.active_timesteps(), &targets)?;

        Ok(PreparedJob {
            params: p.clone(),
            descriptor: JobDescriptor::of(job),
            plan,
            banks,
            contour_latent,
            contour,
            contour_method_used,
            foreground_used,
            banked_sites,
            notices,
            timings,
        })
    }

    /// One generation over prepared banks with the given query mixture.
    pub fn generate(&mut self, prepared: &PreparedJob, mix: &MixParams) -> Result<SketchResult, PipelineError> {
        let p = &prepared.params;
        let mix = mix.clone().clamped();
        let mut timings = prepared.timings.clone();

        let t = Instant::now();
        let (decoded, dumps) = generate_from_banks(
            self.backend.as_mut(),
            &prepared.banks,
            &prepared.contour_latent,
            &prepared.plan,
            &mix,
            p.ablation,
            p.guidance_scale,
            self.record_dumps,
        )?;
        timings.sample_ms = ms(t);

        let t = Instant::now();
        let pre_rcd = decoded.to_gray();
        let rcd = RcdParams {
            enabled: p.rcd.enabled && p.ablation.rcd,
            ..p.rcd
        };
        let sketch = reconstruct(&pre_rcd, &rcd)?;
        timings.postprocess_ms = ms(t);

        let mut descriptor = prepared.descriptor.clone();
        descriptor.params.mix = mix;
        Ok(SketchResult {
            sketch,
            contour: prepared.contour.clone(),
            pre_rcd,
            dumps,
            provenance: Provenance {
                descriptor_sha256: descriptor.hash(),
                descriptor,
                backend_id: self.backend.capabilities().id.clone(),
                schedule_hash: prepared.plan.hash(),
                timesteps: prepared.plan.timesteps().to_vec(),
                contour_method_used: prepared.contour_method_used.clone(),
                foreground_used: prepared.foreground_used.clone(),
                banked_sites: prepared.banked_sites.clone(),
                bank_sha256: prepared.banks.digests(),
                notices: prepared.notices.clone(),
                timings,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
        })
    }

    pub fn extract_sketch(&mut self, job: &SketchJob) -> Result<SketchResult, PipelineError> {
        let prepared = self.prepare(job)?;
        let mix = prepared.params.mix.clone();
        self.generate(&prepared, &mix)
    }

    /// All `ζ × β` combinations over one set of banks.
    pub fn interpolation_grid(&mut self, spec: &GridSpec) -> Result<Grid, PipelineError> {
        spec.validate()?;
        let prepared = self.prepare(&spec.job)?;
        let mut cells = Vec::with_capacity(spec.zeta_values.len());
        for &zeta in &spec.zeta_values {
            let mut row = Vec::with_capacity(spec.beta_values.len());
            for &beta in &spec.beta_values {
                let mix = MixParams {
                    zeta,
                    beta,
                    ..prepared.params.mix.clone()
                };
                row.push(self.generate(&prepared, &mix).map_err(|e| {
                    log::warn!("grid cell zeta={zeta} beta={beta} failed: {e}");
                    e.to_string()
                }));
            }
            cells.push(row);
        }
        Ok(Grid {
            zeta_values: spec.zeta_values.clone(),
            beta_values: spec.beta_values.clone(),
            cells,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub zeta_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub job: SketchJob,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, vals) in [("zeta", &self.zeta_values), ("beta", &self.beta_values)] {
            if vals.is_empty() {
                return Err(PipelineError::InvalidJob(format!("{name} values are empty")));
            }
            if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(PipelineError::InvalidJob(format!("{name} value {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Rows follow `zeta_values`, columns `beta_values`.
pub struct Grid {
    pub zeta_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub cells: Vec<Vec<Result<SketchResult, String>>>,
}

impl Grid {
    pub fn cell(&self, i: usize, j: usize) -> Option<&Result<SketchResult, String>> {
        self.cells.get(i)?.get(j)
    }

    pub fn len(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes results under `root/<first 16 hex chars of the descriptor hash>`.
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir_for(&self, descriptor_hash: &str) -> PathBuf {
        self.root.join(&descriptor_hash[..16])
    }

    /// Writes `descriptor.json`, `provenance.json`, `sketch.png`,
    /// `contour.png` and `pre_rcd.png`; returns the directory.
    pub fn save(&self, result: &SketchResult) -> Result<PathBuf, PipelineError> {
        let prov = &result.provenance;
        let dir = self.dir_for(&prov.descriptor_sha256);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("descriptor.json"), prov.descriptor.to_json())?;
        std::fs::write(
            dir.join("provenance.json"),
            serde_json::to_string_pretty(prov).expect("provenance serializes"),
        )?;
        result.sketch.save_png(dir.join("sketch.png"))?;
        result.contour.save_png(dir.join("contour.png"))?;
        result.pre_rcd.save_png(dir.join("pre_rcd.png"))?;
        Ok(dir)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestItem {
    pub color: PathBuf,
    pub reference: PathBuf,
    pub ground_truth: Option<PathBuf>,
}

impl ManifestItem {
    pub fn name(&self) -> String {
        let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}__{}", stem(&self.color), stem(&self.reference))
    }
}

/// `color,reference[,ground_truth]` rows; relative paths resolve against
/// the manifest's directory. A header row and `#` comments are allowed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut items = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| PipelineError::InvalidJob(format!("manifest: {e}")))?;
            let fields: Vec<&str> = rec.iter().filter(|f| !f.is_empty()).collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields[0].eq_ignore_ascii_case("color") {
                continue;
            }
            if !(2..=3).contains(&fields.len()) {
                return Err(PipelineError::InvalidJob(format!(
                    "manifest row {} has {} fields, expected 2 or 3",
                    i + 1,
                    fields.len()
                )));
            }
            let path = |s: &str| base.join(s);
            items.push(ManifestItem {
                color: path(fields[0]),
                reference: path(fields[1]),
                ground_truth: fields.get(2).map(|s| path(s)),
            });
        }
        Ok(Self { items })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every colour image paired with every reference, colour-major.
    pub fn cross_product(colors: &[PathBuf], references: &[PathBuf]) -> Self {
        Self {
            items: colors
                .iter()
                .flat_map(|c| {
                    references.iter().map(move |r| ManifestItem {
                        color: c.clone(),
                        reference: r.clone(),
                        ground_truth: None,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BatchRow {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    pub error: Option<String>,
}

pub struct BatchReport {
    pub rows: Vec<BatchRow>,
    pub metrics: MetricReport,
}

/// Runs every manifest item in order; one failure does not stop the batch.
pub fn batch_run(
    engine: &mut Engine,
    manifest: &Manifest,
    params: &JobParams,
    store: Option<&ResultStore>,
    metrics: &std::collections::BTreeSet<Metric>,
    extractor: Option<&dyn FeatureExtractor>,
) -> BatchReport {
    let mut rows = Vec::with_capacity(manifest.items.len());
    let mut eval_items = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let name = item.name();
        let mut run = || -> Result<(SketchResult, Option<PathBuf>), PipelineError> {
            let job = SketchJob {
                color: ImageBuffer::load(&item.color)?,
                reference: ImageBuffer::load(&item.reference)?,
                params: params.clone(),
            };
            let result = engine.extract_sketch(&job)?;
            let dir = store.map(|s| s.save(&result)).transpose()?;
            Ok((result, dir))
        };
        match run() {
            Ok((result, dir)) => {
                let pair = match &item.ground_truth {
                    Some(gt) => ImageBuffer::load(gt)
                        .map(|g| (result.sketch.clone(), g))
                        .map_err(|e| format!("ground truth: {e}")),
                    None => Err("no ground truth in manifest".to_string()),
                };
                eval_items.push(EvalItem {
                    name: name.clone(),
                    pair,
                });
                rows.push(BatchRow {
                    name,
                    output_dir: dir,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("batch item {name} failed: {e}");
                eval_items.push(EvalItem {
                    name: name.clone(),
                    pair: Err(e.to_string()),
                });
                rows.push(BatchRow {
                    name,
                    output_dir: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    BatchReport {
        rows,
        metrics: evaluate(eval_items, metrics, extractor),
    }
}

/// Flat `key → value` echo of the parameters most users look at.
pub fn parameter_echo(params: &JobParams) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("zeta".into(), params.mix.zeta.to_string());
    m.insert("beta".into(), params.mix.beta.to_string());
    m.insert(
        "target_sites".into(),
        params.mix.target_sites.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    m.insert("alpha".into(), params.contour.alpha.to_string());
    m.insert("method".into(), params.contour.method.clone());
    m.insert("steps".into(), params.steps.to_string());
    m.insert("guidance_scale".into(), params.guidance_scale.to_string());
    m.insert("resolution".into(), params.resolution.to_string());
    m.insert("seed".into(), params.seed.to_string());
    m.insert("backend".into(), params.backend.clone());
    m.insert("rcd".into(), (params.rcd.enabled && params.ablation.rcd).to_string());
    m.insert("binarize_threshold".into(), params.rcd.binarize_threshold.to_string());
    m.insert("initial_contour".into(), params.ablation.initial_contour.to_string());
    m.insert("msa".into(), params.ablation.msa.to_string());
    m.insert("dct".into(), params.ablation.dct.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockConfig};

    fn small_job() -> SketchJob {
        SketchJob {
            color: ImageBuffer::from_fn_rgb(40, 32, |x, y| {
                if (x as i32 - 20).pow(2) + (y as i32 - 16).pow(2) < 100 {
                    [200, 40, 40]
                } else {
                    [240, 240, 230]
                }
            }),
            reference: ImageBuffer::from_fn_gray(32, 32, |x, y| if (x + 2 * y) % 9 == 0 { 20 } else { 250 }),
            params: JobParams {
                steps: 5,
                resolution: 32,
                ..JobParams::default()
            },
        }
    }

    fn engine(cfg: MockConfig) -> Engine {
        Engine::new(Box::new(MockBackend::new(cfg)))
    }

    #[test]
    fn defaults_echo() {
        let p = JobParams::default();
        assert_eq!((p.mix.zeta, p.mix.beta, p.contour.alpha), (0.4, 0.5, 0.55));
        assert_eq!((p.steps, p.guidance_scale, p.contour.method.as_str()), (50, 7.5, "teed"));
    }

    #[test]
    fn missing_detector_falls_back_unless_strict() {
        let mut e = engine(MockConfig::default());
        let r = e.extract_sketch(&small_job()).unwrap();
        assert_eq!(r.provenance.contour_method_used, "canny");
        assert!(r.provenance.notices.iter().any(|n| n.contains("teed")));
        let mut job = small_job();
        job.params.strict = true;
        assert!(matches!(e.extract_sketch(&job), Err(PipelineError::Contour(_))));
    }

    #[test]
    fn three_inversions_per_prepare() {
        let mut e = engine(MockConfig::default());
        e.prepare(&small_job()).unwrap();
        assert_eq!(e.inversion_count(), 3);
    }

    #[test]
    fn resolution_must_match_factor() {
        let mut e = engine(MockConfig::default());
        let mut job = small_job();
        job.params.resolution = 36;
        assert!(matches!(e.prepare(&job), Err(PipelineError::InvalidJob(_))));
    }

    #[test]
    fn unknown_target_site_rejected() {
        let mut e = engine(MockConfig::default());
        let mut job = small_job();
        job.params.mix = job.params.mix.with_target_sites([3, 40]);
        assert!(matches!(e.prepare(&job), Err(PipelineError::Mix(_))));
    }

    #[test]
    fn descriptor_hash_tracks_params() {
        let job = small_job();
        let a = JobDescriptor::of(&job).hash();
        let mut other = job.clone();
        other.params.mix.zeta = 0.7;
        assert_ne!(a, JobDescriptor::of(&other).hash());
        assert_eq!(a, JobDescriptor::of(&job).hash());
    }

    #[test]
    fn manifest_parsing() {
        let text = "color,reference,gt\n# comment\na.png, r.png\nb.png,r.png,g.png\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.items.len(), 2);
        assert_eq!(m.items[0].color, PathBuf::from("/data/a.png"));
        assert_eq!(m.items[1].ground_truth, Some(PathBuf::from("/data/g.png")));
        assert!(Manifest::parse("only-one\n", Path::new(".")).is_err());
    }

    #[test]
    fn cross_product_layout() {
        let colors: Vec<PathBuf> = (0..25).map(|i| format!("c{i}.png").into()).collect();
        let refs: Vec<PathBuf> = (0..4).map(|i| format!("s{i}.png").into()).collect();
        let m = Manifest::cross_product(&colors, &refs);
        assert_eq!(m.items.len(), 100);
        assert_eq!(m.items[5].color, PathBuf::from("c1.png"));
        assert_eq!(m.items[5].reference, PathBuf::from("s1.png"));
    }

    #[test]
    fn grid_spec_validation() {
        let spec = GridSpec {
            zeta_values: vec![],
            beta_values: vec![0.5],
            job: small_job(),
        };
        assert!(spec.validate().is_err());
        let spec = GridSpec {
            zeta_values: vec![1.5],
            ..spec
        };
        assert!(spec.validate().is_err());
    }
}
