#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixsa::image::ImageBuffer;

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

pub fn hatching(n: u32) -> ImageBuffer {
    ImageBuffer::from_fn_gray(n, n, |x, y| if (x + y) % 23 < 2 || (x * 3 + y) % 47 == 0 { 30 } else { 248 })
}

/// Writes `color.png` and `reference.png` into `dir`.
pub fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let (c, r) = (dir.join("color.png"), dir.join("reference.png"));
    portrait(600, 520).save_png(&c).unwrap();
    hatching(512).save_png(&r).unwrap();
    (c, r)
}

pub fn mixsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsa"))
        .args(args)
        .env_remove("MIXSA_CONFIG")
        .env_remove("MIXSA_BACKEND")
        .env_remove("MIXSA_WEIGHTS")
        .output()
        .expect("run mixsa binary")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The `wrote <dir>/sketch.png` line printed by `extract`.
pub fn written_sketch(o: &Output) -> PathBuf {
    stdout(o)
        .lines()
        .filter_map(|l| l.strip_prefix("wrote "))
        .find(|p| p.ends_with("sketch.png"))
        .map(PathBuf::from)
        .expect("extract reports the sketch path")
}
