mod common;

use std::collections::BTreeSet;

use mixsa::attnbank::{AttentionBank, BankKey, BankSet, BankSource, TensorKind};
use mixsa::backend::AttentionController;
use mixsa::ddim::{sample, SamplingPlan};
use mixsa::metrics::Metric;
use mixsa::mixer::{make_controller, mixed_attention, MixParams, MixToggles};
use mixsa::pipeline::{
    batch_run, generate_from_banks, Ablation, GridSpec, JobDescriptor, JobParams, Manifest, PipelineError,
    ResultStore,
};

use common::*;

#[test]
fn defaults_give_sparse_reproducible_sketch() {
    let params = JobParams::default();
    let a = engine("mock").extract_sketch(&job(params.clone())).unwrap();
    let b = engine("mock").extract_sketch(&job(params)).unwrap();
    assert!(a.sketch.white_fraction() >= 0.5, "{}", a.sketch.white_fraction());
    assert_eq!(a.sketch.encode_png().unwrap(), b.sketch.encode_png().unwrap());
    assert_eq!((a.sketch.width(), a.sketch.height()), (512, 512));
    assert_eq!(a.provenance.timesteps.len(), 51);
    assert_eq!(a.provenance.contour_method_used, "canny");
    assert!(a.provenance.notices.iter().any(|n| n.contains("teed")));
}

#[test]
fn zero_denoiser_returns_the_contour() {
    let mut p = small_params(64, 10);
    p.rcd.enabled = false;
    let r = engine("mock-zero").extract_sketch(&job(p)).unwrap();
    assert_eq!(r.sketch, r.contour);
}

#[test]
fn zeta_zero_reproduces_reference_self_attention() {
    let mut e = echo_identity();
    e.record_dumps(true);
    let prepared = e.prepare(&job(small_params(32, 6))).unwrap();
    let mix = MixParams::new(0.0, 0.7);
    let r = e.generate(&prepared, &mix).unwrap();
    let dumps = r.dumps.unwrap();
    assert_eq!(dumps.len(), 2 * 6);
    for d in dumps {
        let get = |kind| {
            prepared
                .banks
                .reference
                .lookup(&BankKey::new(d.timestep, d.site, kind, BankSource::Reference))
                .unwrap()
                .to_array()
        };
        let (q, k, v) = (get(TensorKind::Q), get(TensorKind::K), get(TensorKind::V));
        let own = mixed_attention(&q.view(), &k.view(), &v.view(), &mix).unwrap();
        let err = (&own - &d.output).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "t={} site={}: {err}", d.timestep, d.site);
    }
}

#[test]
fn colour_bank_is_unused_when_zeta_one_beta_zero() {
    let mut e = echo_identity();
    let prepared = e.prepare(&job(small_params(32, 6))).unwrap();
    let without = BankSet {
        reference: prepared.banks.reference.clone(),
        color: AttentionBank::new(prepared.banks.color.meta().clone()),
        contour: prepared.banks.contour.clone(),
    };
    let mix = MixParams::new(1.0, 0.0);
    let run = |banks: &BankSet, e: &mut mixsa::pipeline::Engine| {
        let mut ctrl = make_controller(banks, &mix, MixToggles::default(), false);
        sample(
            &prepared.contour_latent,
            e.backend_mut(),
            &prepared.plan,
            Some(&mut ctrl as &mut dyn AttentionController),
            1.0,
        )
        .unwrap()
    };
    let full = run(&prepared.banks, &mut e);
    let empty = run(&without, &mut e);
    assert_eq!(full, empty);

    // any β > 0 needs the colour bank
    let mix = MixParams::new(1.0, 0.3);
    let mut ctrl = make_controller(&without, &mix, MixToggles::default(), false);
    let err = sample(
        &prepared.contour_latent,
        e.backend_mut(),
        &prepared.plan,
        Some(&mut ctrl as &mut dyn AttentionController),
        1.0,
    );
    assert!(err.is_err());
}

#[test]
fn grid_cells_match_standalone_runs() {
    let params = small_params(64, 8);
    let spec = GridSpec {
        zeta_values: vec![0.0, 0.5, 1.0],
        beta_values: vec![0.0, 0.5, 1.0],
        job: job(params.clone()),
    };
    let mut e = engine("mock");
    let grid = e.interpolation_grid(&spec).unwrap();
    assert_eq!(e.inversion_count(), 3);
    assert_eq!(grid.len(), 9);
    for (i, &zeta) in spec.zeta_values.iter().enumerate() {
        for (j, &beta) in spec.beta_values.iter().enumerate() {
            let mut p = params.clone();
            p.mix.zeta = zeta;
            p.mix.beta = beta;
            let single = engine("mock").extract_sketch(&job(p.clone())).unwrap();
            let cell = grid.cell(i, j).unwrap().as_ref().unwrap();
            assert_eq!(cell.sketch, single.sketch, "cell ({i},{j})");
            assert_eq!(cell.provenance.descriptor_sha256, JobDescriptor::of(&job(p)).hash());
        }
    }
}

#[test]
fn generation_refuses_banks_from_another_schedule() {
    let mut e = engine("mock");
    let prepared = e.prepare(&job(small_params(64, 10))).unwrap();
    let other = SamplingPlan::uniform(e.backend().native_schedule(), 12).unwrap();
    let z = mixsa::backend::LatentGrid::new(prepared.contour_latent.values.clone(), other.final_timestep());
    let err = generate_from_banks(
        e.backend_mut(),
        &prepared.banks,
        &z,
        &other,
        &prepared.params.mix,
        Ablation::default(),
        1.0,
        false,
    )
    .unwrap_err();
    assert!(matches!(err, PipelineError::Bank(_)), "{err}");
}

#[test]
fn generation_leaves_banks_untouched() {
    let mut e = engine("mock");
    let prepared = e.prepare(&job(small_params(64, 8))).unwrap();
    let before = prepared.banks.digests();
    let r = e.generate(&prepared, &MixParams::new(0.4, 0.5)).unwrap();
    assert_eq!(prepared.banks.digests(), before);
    assert_eq!(r.provenance.bank_sha256, before);
}

#[test]
fn each_ablation_changes_the_output() {
    let base = small_params(64, 10);
    let hash = |p: &JobParams| {
        let r = engine("mock").extract_sketch(&job(p.clone())).unwrap();
        (r.sketch.content_hash(), JobDescriptor::of(&job(p.clone())).hash())
    };
    let reference = hash(&base);
    let toggles: [fn(&mut Ablation); 4] = [
        |a| a.initial_contour = false,
        |a| a.msa = false,
        |a| a.dct = false,
        |a| a.rcd = false,
    ];
    for (k, off) in toggles.iter().enumerate() {
        let mut p = base.clone();
        off(&mut p.ablation);
        let h = hash(&p);
        assert_ne!(h.0, reference.0, "ablation {k} left the sketch unchanged");
        assert_ne!(h.1, reference.1);
    }
}

#[test]
fn result_directory_is_named_by_descriptor_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let r = engine("mock").extract_sketch(&job(small_params(64, 4))).unwrap();
    let dir = ResultStore::new(tmp.path()).save(&r).unwrap();
    let text = std::fs::read_to_string(dir.join("descriptor.json")).unwrap();
    use sha2::Digest;
    let digest = hex::encode(sha2::Sha256::digest(text.as_bytes()));
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), &digest[..16]);
    for f in ["sketch.png", "contour.png", "pre_rcd.png", "provenance.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn batch_continues_past_unreadable_items() {
    let tmp = tempfile::tempdir().unwrap();
    portrait(120, 100).save_png(tmp.path().join("c.png")).unwrap();
    hatching(64).save_png(tmp.path().join("r.png")).unwrap();
    hatching(64).save_png(tmp.path().join("gt.png")).unwrap();
    let manifest = Manifest::parse(
        "color,reference,ground_truth\nc.png,r.png,gt.png\nmissing.png,r.png,gt.png\n",
        tmp.path(),
    )
    .unwrap();
    let metrics: BTreeSet<Metric> = [Metric::Psnr, Metric::Ssim].into();
    let mut e = engine("mock");
    let report = batch_run(&mut e, &manifest, &small_params(64, 4), None, &metrics, None);
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows[0].error.is_none());
    assert!(report.rows[1].error.as_deref().unwrap().contains("missing.png"));
    assert_eq!(report.metrics.item_count, 2);
    assert_eq!(report.metrics.succeeded, 1);
    let psnr = report.metrics.aggregate.psnr.as_ref().unwrap();
    assert_eq!(psnr.mean, report.metrics.items[0].psnr.unwrap());
}
