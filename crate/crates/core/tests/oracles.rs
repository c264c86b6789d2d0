//! Implementations checked against independent formulations.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixsa::backend::{sd14_schedule, LatentGrid, ScalarLinearBackend};
use mixsa::ddim::{invert, make_schedule, sample, BetaSpec, SamplingPlan};
use mixsa::image::ImageBuffer;
use mixsa::metrics::{fid, kid, psnr, ssim};
use mixsa::mixer::{blend_queries, mixed_attention_head, MixParams};

fn naive_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let (tq, d) = q.dim();
    let (tk, dv) = v.dim();
    let mut out = Array2::zeros((tq, dv));
    for i in 0..tq {
        let mut logits = vec![0.0; tk];
        for j in 0..tk {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[[i, c]] * k[[j, c]];
            }
            logits[j] = dot / (d as f64).sqrt();
        }
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..tk {
            for c in 0..dv {
                out[[i, c]] += w[j] / z * v[[j, c]];
            }
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-2.0..2.0))
}

#[test]
fn mixed_attention_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (qc, qs, qr) = (random(&mut rng, 8, 8), random(&mut rng, 8, 8), random(&mut rng, 8, 8));
        let (k, v) = (random(&mut rng, 16, 8), random(&mut rng, 16, 8));
        let p = MixParams::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let qm = blend_queries(&qc.view(), &qs.view(), &qr.view(), &p).unwrap();
        let got = mixed_attention_head(&qm.view(), &k.view(), &v.view(), &p).unwrap();
        let want = naive_attention(&qm, &k, &v);
        let err = (&got - &want).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "max err {err}");
    }
}

#[test]
fn blend_endpoints_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (qc, qs, qr) = (random(&mut rng, 4, 8), random(&mut rng, 4, 8), random(&mut rng, 4, 8));
        let at = |z, b| blend_queries(&qc.view(), &qs.view(), &qr.view(), &MixParams::new(z, b)).unwrap();
        assert_eq!(at(0.0, rng.random()), qr);
        assert_eq!(at(1.0, 1.0), qc);
        assert_eq!(at(1.0, 0.0), qs);
    }
}

#[test]
fn schedule_is_a_cumulative_product() {
    let s = sd14_schedule();
    let (ab, b) = (s.alpha_bars(), s.betas());
    assert_eq!(ab[0], 1.0);
    assert_eq!(ab.len(), 1001);
    let mut prod = 1.0;
    for t in 1..ab.len() {
        prod *= 1.0 - b[t - 1];
        assert!(ab[t] < ab[t - 1]);
        assert!((ab[t] - prod).abs() < 1e-12);
    }
    // sqrt-linear endpoints
    assert!((b[0] - 0.00085).abs() < 1e-15);
    assert!((b[999] - 0.012).abs() < 1e-15);
}

fn latent(seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::new(Array3::from_shape_simple_fn((4, 16, 16), || rng.random_range(-1.0..1.0)), 0)
}

/// With `eps = c z` every DDIM step multiplies each element by a scalar.
fn scalar_round_trip_gain(ab: &[f64], ts: &[usize], c: f64) -> f64 {
    let mut g = 1.0;
    for w in ts.windows(2) {
        let (p, n) = (ab[w[0]], ab[w[1]]);
        let s = (n / p).sqrt();
        g *= s + c * ((1.0 - n).sqrt() - s * (1.0 - p).sqrt());
    }
    for w in ts.windows(2).rev() {
        let (p, cur) = (ab[w[0]], ab[w[1]]);
        let x0_gain = (1.0 - (1.0 - cur).sqrt() * c) / cur.sqrt();
        g *= p.sqrt() * x0_gain + (1.0 - p).sqrt() * c;
    }
    g
}

#[test]
fn linear_denoiser_follows_scalar_recurrence() {
    let z0 = latent(3);
    for steps in [10, 25, 50] {
        let plan = SamplingPlan::uniform(sd14_schedule(), steps).unwrap();
        let mut be = ScalarLinearBackend::new(0.1, 4);
        let zt = invert(&z0, &mut be, &plan, None, 1.0).unwrap().into_end();
        let back = sample(&zt, &mut be, &plan, None, 1.0).unwrap();
        let g = scalar_round_trip_gain(plan.schedule().alpha_bars(), plan.timesteps(), 0.1);
        let err = (&back.values - &z0.values.mapv(|v| v * g)).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "S={steps}: {err}");
    }
}

#[test]
fn zero_denoiser_round_trip_is_exact() {
    let z0 = latent(5);
    let plan = SamplingPlan::uniform(make_schedule(1000, &BetaSpec::Linear { start: 1e-4, end: 0.02 }).unwrap(), 50).unwrap();
    let mut be = ScalarLinearBackend::new(0.0, 4);
    let zt = invert(&z0, &mut be, &plan, None, 1.0).unwrap().into_end();
    let back = sample(&zt, &mut be, &plan, None, 1.0).unwrap();
    assert!(back.max_abs_diff(&z0) < 1e-12);
}

#[test]
fn psnr_extremes() {
    let black = ImageBuffer::filled_gray(8, 8, 0);
    let white = ImageBuffer::filled_gray(8, 8, 255);
    assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    let one_off = ImageBuffer::filled_gray(8, 8, 1);
    // 10 log10(255^2 / 1)
    assert!((psnr(&black, &one_off).unwrap() - 48.130803608679105).abs() < 1e-9);
}

fn ssim_pair() -> (ImageBuffer, ImageBuffer) {
    let a = ImageBuffer::from_fn_gray(40, 32, |x, y| ((x * 7 + y * 13) % 256) as u8);
    let b = ImageBuffer::from_fn_gray(40, 32, |x, y| ((x * x + 3 * y) % 256) as u8);
    (a, b)
}

#[test]
fn ssim_matches_reference_implementation() {
    // skimage.metrics.structural_similarity(gaussian_weights=True, sigma=1.5,
    // use_sample_covariance=False, data_range=255)
    let (a, b) = ssim_pair();
    assert!((ssim(&a, &b).unwrap() - 0.09338639341834412).abs() < 1e-9);
    assert!((ssim(&a, &a.inverted()).unwrap() - -0.6762336042825913).abs() < 1e-9);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

fn feature_sets() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let a = (0..12)
        .map(|i| {
            let i = i as f64;
            vec![(i * 0.7).sin(), (i * 1.3).cos() + 0.1 * i, (i % 5.0) / 5.0]
        })
        .collect();
    let b = (0..12)
        .map(|i| {
            let i = i as f64;
            vec![(i * 0.9).sin() + 0.5, (i * 0.4).cos() * 2.0, (i % 3.0) / 3.0]
        })
        .collect();
    (a, b)
}

#[test]
fn fid_and_kid_match_numpy() {
    // scipy.linalg.sqrtm-based FID and the unbiased cubic-kernel MMD
    let (a, b) = feature_sets();
    let f = fid(&a, &b).unwrap();
    assert!(!f.jittered);
    assert!((f.value - 1.6791740058608906).abs() < 1e-9, "{}", f.value);
    assert!((kid(&a, &b).unwrap() - 1.2983832739464378).abs() < 1e-9);
}

#[test]
fn fid_two_gaussians_closed_form() {
    // Axis-aligned point sets whose sample covariances are exactly diagonal:
    // FID = |mu_a - mu_b|^2 + sum (sa + sb - 2 sqrt(sa sb)).
    let cloud = |mu: [f64; 2], s: [f64; 2]| -> Vec<Vec<f64>> {
        let r = [s[0].sqrt() * 1.5_f64.sqrt(), s[1].sqrt() * 1.5_f64.sqrt()];
        vec![
            vec![mu[0] + r[0], mu[1]],
            vec![mu[0] - r[0], mu[1]],
            vec![mu[0], mu[1] + r[1]],
            vec![mu[0], mu[1] - r[1]],
        ]
    };
    let (ma, sa, mb, sb): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) = ([0.0, 1.0], [2.0, 0.5], [3.0, -1.0], [0.25, 4.0]);
    let want = (ma[0] - mb[0]).powi(2)
        + (ma[1] - mb[1]).powi(2)
        + (0..2).map(|i| sa[i] + sb[i] - 2.0 * (sa[i] * sb[i]).sqrt()).sum::<f64>();
    let got = fid(&cloud(ma, sa), &cloud(mb, sb)).unwrap();
    assert!((got.value - want).abs() < 1e-4, "{} vs {want}", got.value);
}
