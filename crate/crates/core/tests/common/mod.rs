#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumornet::data::Sample;
use tumornet::Tensor;

/// `n` images of `size`×`size`: a bright square whose position encodes the
/// class, plus low-amplitude noise.
pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = size / 3;
    (0..n)
        .map(|i| {
            let label = i % 3;
            let (r0, c0) = [(0, 0), (side, side), (2 * side, 2 * side)][label];
            let mut data = Vec::with_capacity(size * size * 3);
            for r in 0..size {
                for c in 0..size {
                    let inside = (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c);
                    let v: f32 = if inside { 0.8 } else { -0.8 } + rng.random_range(-0.1..0.1);
                    data.extend_from_slice(&[v, v, v]);
                }
            }
            Sample {
                input: Tensor::new(vec![size, size, 3], data).unwrap(),
                label,
            }
        })
        .collect()
}

/// Write `per_class` 8-bit grayscale PNGs per class plus `manifest.csv`
/// into `dir`; returns the manifest path.
pub fn write_png_dataset(dir: &std::path::Path, per_class: usize, size: u32, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::from("path,label,split\n");
    let classes = ["glioma", "meningioma", "pituitary"];
    let side = size / 3;
    for (label, class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let (r0, c0) = (label as u32 * side, label as u32 * side);
            let img = image::GrayImage::from_fn(size, size, |c, r| {
                let inside = (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c);
                let base: i32 = if inside { 220 } else { 30 };
                image::Luma([(base + rng.random_range(-20..=20)) as u8])
            });
            let name = format!("{class}_{i}.png");
            img.save(dir.join(&name)).unwrap();
            manifest.push_str(&format!("{name},{class},\n"));
        }
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// Run the CLI in-process, returning exit code and stdout.
pub fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = tumornet::cli::run(std::iter::once("tumornet").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}
