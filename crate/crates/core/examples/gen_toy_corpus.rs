//! Writes the small procedural image set used by the tests and the toy
//! configuration: `data/toy/train` (6 images) and `data/toy/val` (2).
//!
//! Usage: `cargo run --example gen_toy_corpus [-- OUT_DIR]`

use std::f64::consts::PI;
use std::path::PathBuf;

use ddtb::data::{save_image, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 96;

fn render(kind: usize, rng: &mut ChaCha8Rng) -> Image {
    let fx = rng.random_range(0.04..0.18);
    let fy = rng.random_range(0.04..0.18);
    let phase = rng.random_range(0.0..2.0 * PI);
    let tint: [f64; 3] = [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)];
    let (cx, cy) = (rng.random_range(20.0..76.0), rng.random_range(20.0..76.0));
    let mut data = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (xf, yf) = (x as f64, y as f64);
            let v = match kind % 4 {
                // oriented stripes
                0 => 0.5 + 0.5 * (fx * xf + fy * yf + phase).sin(),
                // rings
                1 => {
                    let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                    0.5 + 0.5 * (r * fx * 2.0 + phase).cos()
                }
                // checkerboard with soft ramp
                2 => {
                    let c = ((x / 8 + y / 8) % 2) as f64;
                    0.7 * c + 0.3 * xf / SIDE as f64
                }
                _ => {
                    let blob = (-((xf - cx).powi(2) + (yf - cy).powi(2)) / 300.0).exp();
                    0.3 * (fx * xf).sin().abs() + 0.7 * blob
                }
            };
            for t in tint {
                let n: f64 = rng.random_range(-0.03..0.03);
                data.push(((v * t + n).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image::new(SIDE, SIDE, data).expect("consistent size")
}

fn main() {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy"));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..8 {
        let img = render(i, &mut rng);
        let dir = root.join(if i < 6 { "train" } else { "val" });
        std::fs::create_dir_all(&dir).expect("create output directory");
        let p = dir.join(format!("toy_{i:02}.ppm"));
        save_image(&img, &p).expect("write image");
        println!("{}", p.display());
    }
}
