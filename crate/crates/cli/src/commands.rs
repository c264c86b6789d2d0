use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use mixsa::backend::{open_backend, open_checkpoint, sd14_schedule, WeightSource};
use mixsa::config::{apply_param, Config};
use mixsa::image::ImageBuffer;
use mixsa::metrics::{parse_metrics, FeatureExtractor, MockFeatureExtractor};
use mixsa::pipeline::{batch_run, parameter_echo, Engine, Foreground, GridSpec, JobParams, Manifest, ResultStore, SketchJob};
use mixsa::rcd::{band_reconstruction_error, mean_drift_diagnostic, mean_drift_noisy, BlurDenoiser};

use crate::args::{Cli, DiagnoseArgs, EvalArgs, ExtractArgs, GridArgs, JobFlags, MixFlags};

pub const DEFAULT_OUT: &str = "mixsa-out";

/// Shared context resolved from global flags and the config file.
pub struct RunContext {
    pub config: Config,
    pub backend: Option<String>,
    pub weights: Option<String>,
}

impl RunContext {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let config = match &cli.config {
            Some(p) => Config::load(p).with_context(|| format!("config {}", p.display()))?,
            None => Config::default(),
        };
        Ok(Self {
            config,
            backend: cli.backend.clone(),
            weights: cli.weights.clone(),
        })
    }

    /// Defaults, then config overrides, then flags.
    pub fn params(&self, mix: &MixFlags, job: &JobFlags) -> Result<JobParams> {
        let mut p = JobParams::default();
        self.config.apply(&mut p);
        if let Some(b) = &self.backend {
            p.backend = b.clone();
        }
        apply_flags(&mut p, mix, job)?;
        Ok(p)
    }

    pub fn out_root(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned()
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn engine(&self, params: &JobParams) -> Result<Engine> {
        let id = params.backend.trim();
        let backend = if id == "sd14" {
            let weights = self
                .weights
                .as_deref()
                .context("backend sd14 needs --weights or MIXSA_WEIGHTS")?;
            let bw = self.config.bw_finetune.as_deref().map(WeightSource::parse);
            open_checkpoint(&WeightSource::parse(weights), bw.as_ref())?
        } else {
            open_backend(id)?
        };
        let (detectors, saliency) = self.config.registries()?;
        Ok(Engine::with_registries(backend, detectors, saliency))
    }
}

pub fn apply_flags(p: &mut JobParams, mix: &MixFlags, f: &JobFlags) -> Result<()> {
    let mut set = |k: &str, v: String| apply_param(p, k, &v).map_err(|e| anyhow::anyhow!("--{}: {e}", k.replace('_', "-")));
    if let Some(v) = mix.zeta {
        set("zeta", v.to_string())?;
    }
    if let Some(v) = mix.beta {
        set("beta", v.to_string())?;
    }
    if let Some(v) = f.alpha {
        set("alpha", v.to_string())?;
    }
    if let Some(v) = &f.method {
        set("method", v.clone())?;
    }
    if let Some(v) = &f.target_sites {
        set("target_sites", v.clone())?;
    }
    if let Some(v) = f.steps {
        set("steps", v.to_string())?;
    }
    if let Some(v) = f.guidance_scale {
        set("guidance_scale", v.to_string())?;
    }
    if let Some(v) = f.resolution {
        set("resolution", v.to_string())?;
    }
    if let Some(v) = f.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = f.binarize_threshold {
        set("binarize_threshold", v.to_string())?;
    }
    if let Some(v) = &f.bilateral {
        set("bilateral", v.clone())?;
    }
    if let Some(v) = &f.contrast {
        set("contrast", v.clone())?;
    }
    if f.no_rcd {
        p.ablation.rcd = false;
    }
    if f.no_initial {
        p.ablation.initial_contour = false;
    }
    if f.no_msa {
        p.ablation.msa = false;
    }
    if f.no_dct {
        p.ablation.dct = false;
    }
    if let Some(name) = &f.foreground {
        p.foreground = Foreground::Adapter {
            name: name.clone(),
            hard: f.hard_mask,
        };
    }
    p.strict |= f.strict;
    p.bank_all_sites |= f.bank_all_sites;
    if !(0.0..=1.0).contains(&p.mix.zeta) || !(0.0..=1.0).contains(&p.mix.beta) {
        log::warn!("zeta/beta outside [0,1] will be clamped");
    }
    Ok(())
}

pub fn print_params(params: &JobParams) {
    println!("resolved parameters:");
    for (k, v) in parameter_echo(params) {
        println!("  {k} = {v}");
    }
}

fn load(path: &Path, what: &str) -> Result<ImageBuffer> {
    ImageBuffer::load(path).with_context(|| format!("{what} image {}", path.display()))
}

pub fn extract(ctx: &RunContext, a: &ExtractArgs) -> Result<()> {
    let params = ctx.params(&a.mix, &a.job)?;
    print_params(&params);
    let job = SketchJob {
        color: load(&a.inputs.color, "colour")?,
        reference: load(&a.inputs.reference, "reference")?,
        params: params.clone(),
    };
    let mut engine = ctx.engine(&params)?;
    let result = engine.extract_sketch(&job)?;
    let dir = ResultStore::new(ctx.out_root(a.out.as_ref())).save(&result)?;
    if let Some(o) = &a.output {
        result.sketch.save_png(o).with_context(|| format!("writing {}", o.display()))?;
        println!("wrote {}", o.display());
    }
    println!("wrote {}", dir.join("sketch.png").display());
    Ok(())
}

pub fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("{what} value `{x}`")))
        .collect::<Result<_>>()?;
    if v.is_empty() {
        bail!("{what} list is empty");
    }
    Ok(v)
}

pub fn grid(ctx: &RunContext, a: &GridArgs) -> Result<()> {
    let params = ctx.params(&MixFlags::default(), &a.job)?;
    let spec = GridSpec {
        zeta_values: parse_list(&a.zeta, "zeta")?,
        beta_values: parse_list(&a.beta, "beta")?,
        job: SketchJob {
            color: load(&a.inputs.color, "colour")?,
            reference: load(&a.inputs.reference, "reference")?,
            params: params.clone(),
        },
    };
    print_params(&params);
    println!("  zeta_values = {:?}", spec.zeta_values);
    println!("  beta_values = {:?}", spec.beta_values);
    let mut engine = ctx.engine(&params)?;
    let grid = engine.interpolation_grid(&spec)?;
    let tag = mixsa::pipeline::JobDescriptor::of(&spec.job).hash();
    let dir = ctx.out_root(a.out.as_ref()).join(format!("grid-{}", &tag[..16]));
    std::fs::create_dir_all(&dir)?;
    let mut index = Vec::new();
    let mut failures = 0;
    for (i, row) in grid.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let (zeta, beta) = (grid.zeta_values[i], grid.beta_values[j]);
            match cell {
                Ok(r) => {
                    let name = format!("cell_{i}_{j}.png");
                    r.sketch.save_png(dir.join(&name))?;
                    index.push(serde_json::json!({"i": i, "j": j, "zeta": zeta, "beta": beta, "file": name,
                        "descriptor_sha256": r.provenance.descriptor_sha256}));
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("cell ({i},{j}) zeta={zeta} beta={beta} failed: {e}");
                    index.push(serde_json::json!({"i": i, "j": j, "zeta": zeta, "beta": beta, "error": e}));
                }
            }
        }
    }
    std::fs::write(dir.join("grid.json"), serde_json::to_string_pretty(&index)?)?;
    println!(
        "wrote {} cells to {} ({} inversions)",
        grid.len() - failures,
        dir.display(),
        engine.inversion_count()
    );
    if failures > 0 {
        bail!("{failures} grid cells failed");
    }
    Ok(())
}

pub fn extractor_by_name(name: Option<&str>) -> Result<Option<Box<dyn FeatureExtractor>>> {
    match name {
        None => Ok(None),
        Some("mock") => Ok(Some(Box::new(MockFeatureExtractor))),
        Some(other) => bail!("unknown feature extractor `{other}`; built in: mock"),
    }
}

pub fn eval(ctx: &RunContext, a: &EvalArgs) -> Result<()> {
    let params = ctx.params(&a.mix, &a.job)?;
    print_params(&params);
    let metrics = parse_metrics(&a.metrics)?;
    let extractor = extractor_by_name(a.extractor.as_deref())?;
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let root = ctx.out_root(a.out.as_ref());
    let store = ResultStore::new(&root);
    let mut engine = ctx.engine(&params)?;
    let report = batch_run(&mut engine, &manifest, &params, Some(&store), &metrics, extractor.as_deref());
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("report.tsv"), report.metrics.to_tsv())?;
    std::fs::write(root.join("report.json"), report.metrics.to_json())?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    print!("{}", report.metrics.to_tsv());
    for n in &report.metrics.notices {
        eprintln!("notice: {n}");
    }
    println!(
        "{} items, {} failed; report at {}",
        report.rows.len(),
        failed,
        root.join("report.tsv").display()
    );
    Ok(())
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    if a.steps == 0 {
        bail!("--steps must be at least 1");
    }
    let n = a.size;
    println!("mean drift (signal space, x <- x/2)");
    println!("step\tblack\twhite\tnoisy_black");
    let black = ImageBuffer::filled_gray(n, n, 0);
    let white = ImageBuffer::filled_gray(n, n, 255);
    let (b, w, nb) = (
        mean_drift_diagnostic(&black, a.steps),
        mean_drift_diagnostic(&white, a.steps),
        mean_drift_noisy(&black, a.steps, a.seed),
    );
    for i in 0..a.steps {
        println!("{}\t{:.6}\t{:.6}\t{:.6}", i + 1, b[i], w[i], nb[i]);
    }
    let schedule = sd14_schedule();
    let checker = ImageBuffer::from_fn_gray(n, n, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
    let flat = ImageBuffer::filled_gray(n, n, 204);
    println!();
    println!("band reconstruction error (blur denoiser)");
    println!("t\tchecker_high\tchecker_low\tflat_high\tflat_low");
    let ts: Vec<usize> = a
        .timesteps
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("timestep `{s}`")))
        .collect::<Result<_>>()?;
    for t in ts {
        let c = band_reconstruction_error(&checker, &schedule, t, &BlurDenoiser, a.seed)?;
        let f = band_reconstruction_error(&flat, &schedule, t, &BlurDenoiser, a.seed)?;
        println!(
            "{t}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            c.high_band_error, c.low_band_error, f.high_band_error, f.low_band_error
        );
    }
    Ok(())
}

/// Parses a flat `key=value` document (newline or `&` separated).
pub fn parse_param_doc(doc: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in doc.split(['\n', '&']) {
        let part = part.trim();
        if part.is_empty() || part.starts_with('#') {
            continue;
        }
        let (k, v) = part
            .split_once('=')
            .with_context(|| format!("expected key=value, got `{part}`"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
