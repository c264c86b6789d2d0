#![allow(dead_code)]

use mixsa::backend::{open_backend, MockBackend, MockConfig};
use mixsa::image::ImageBuffer;
use mixsa::pipeline::{Engine, JobParams, SketchJob};

/// Face-like ellipse on sky over grass, deliberately not square.
pub fn portrait(w: u32, h: u32) -> ImageBuffer {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let r = w.min(h) as f64 * 0.3;
    ImageBuffer::from_fn_rgb(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if dx * dx / 1.5 + dy * dy < r * r {
            [210, 160, 120]
        } else if y as f64 > h as f64 * 0.8 {
            [60, 90, 40]
        } else {
            [150, 190, 230]
        }
    })
}

/// Diagonal pen hatching on paper.
pub fn hatching(n: u32) -> ImageBuffer {
    ImageBuffer::from_fn_gray(n, n, |x, y| if (x + y) % 23 < 2 || (x * 3 + y) % 47 == 0 { 30 } else { 248 })
}

pub fn small_params(resolution: u32, steps: usize) -> JobParams {
    JobParams {
        resolution,
        steps,
        ..JobParams::default()
    }
}

pub fn job(params: JobParams) -> SketchJob {
    SketchJob {
        color: portrait(300, 260),
        reference: hatching(256),
        params,
    }
}

pub fn engine(id: &str) -> Engine {
    Engine::new(open_backend(id).unwrap())
}

pub fn echo_identity() -> Engine {
    Engine::new(Box::new(MockBackend::new(MockConfig::echo_identity())))
}
