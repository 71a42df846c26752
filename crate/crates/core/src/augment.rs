//! Seeded affine augmentation: rotation, zoom, horizontal flip, width and
//! height shift, shear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    #[default]
    NearestEdge,
    Constant(f32),
}

/// Sampling ranges. Angles are in degrees, shifts are fractions of the
/// image extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_max: f64,
    pub zoom_range: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub shear_max: f64,
    pub horizontal_flip: bool,
    pub interpolation: Interpolation,
    pub fill: Fill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max: 15.0,
            zoom_range: 0.1,
            width_shift: 0.1,
            height_shift: 0.1,
            shear_max: 10.0,
            horizontal_flip: true,
            interpolation: Interpolation::Bilinear,
            fill: Fill::NearestEdge,
        }
    }
}

impl AugmentConfig {
    /// All ranges zero and flipping off.
    pub fn identity() -> Self {
        Self {
            rotation_max: 0.0,
            zoom_range: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            shear_max: 0.0,
            horizontal_flip: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_max == 0.0
            && self.zoom_range == 0.0
            && self.width_shift == 0.0
            && self.height_shift == 0.0
            && self.shear_max == 0.0
            && !self.horizontal_flip
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_max", self.rotation_max),
            ("zoom_range", self.zoom_range),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
            ("shear_max", self.shear_max),
        ];
        for (name, v) in ranges {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("augmentation.{name} must be a non-negative number, got {v}")));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::Config(format!(
                "augmentation.zoom_range must be below 1, got {}",
                self.zoom_range
            )));
        }
        if self.shear_max >= 90.0 {
            return Err(Error::Config(format!(
                "augmentation.shear_max must be below 90 degrees, got {}",
                self.shear_max
            )));
        }
        if let Fill::Constant(v) = self.fill {
            if !v.is_finite() {
                return Err(Error::Config("augmentation.fill constant must be finite".into()));
            }
        }
        Ok(())
    }
}

/// One concrete transform. `tx`/`ty` are in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: f64,
    pub zoom: f64,
    pub tx: f64,
    pub ty: f64,
    pub shear: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        theta: 0.0,
        zoom: 1.0,
        tx: 0.0,
        ty: 0.0,
        shear: 0.0,
        flip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

/// Draw a transform for an image of `(height, width)`. Fields are drawn in a
/// fixed order so a given generator state always yields the same params.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, image_size: (usize, usize), rng: &mut R) -> AffineParams {
    let (h, w) = image_size;
    let theta = symmetric(rng, cfg.rotation_max);
    let zoom = 1.0 + symmetric(rng, cfg.zoom_range);
    let tx = symmetric(rng, cfg.width_shift * w as f64);
    let ty = symmetric(rng, cfg.height_shift * h as f64);
    let shear = symmetric(rng, cfg.shear_max);
    let flip = cfg.horizontal_flip && rng.random_bool(0.5);
    AffineParams {
        theta,
        zoom,
        tx,
        ty,
        shear,
        flip,
    }
}

type Mat3 = [[f64; 3]; 3];

fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn translate(x: f64, y: f64) -> Mat3 {
    [[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]]
}

/// sin/cos with exact values at multiples of 90 degrees.
fn sin_cos_deg(theta: f64) -> (f64, f64) {
    let quarter = theta / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        theta.to_radians().sin_cos()
    }
}

/// Forward matrix in (x = column, y = row) pixel coordinates, mapping source
/// positions to output positions.
pub fn forward_matrix(p: &AffineParams, height: usize, width: usize) -> Mat3 {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (s, c) = sin_cos_deg(p.theta);
    let rotate = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]];
    let zoom = [[p.zoom, 0.0, 0.0], [0.0, p.zoom, 0.0], [0.0, 0.0, 1.0]];
    let shear = [[1.0, p.shear.to_radians().tan(), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let flip = [[if p.flip { -1.0 } else { 1.0 }, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let chain = [translate(cx, cy), flip, shear, zoom, rotate, translate(p.tx, p.ty), translate(-cx, -cy)];
    chain.iter().skip(1).fold(chain[0], |acc, m| mul(&acc, m))
}

fn invert_affine(m: &Mat3) -> Mat3 {
    let [[a, b, tx], [c, d, ty], _] = *m;
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)], [0.0, 0.0, 1.0]]
}

struct Sampler<'a> {
    data: &'a [f32],
    h: usize,
    w: usize,
    c: usize,
    fill: Fill,
}

impl Sampler<'_> {
    /// Pixel `(row, col, ch)` with the fill rule for out-of-range positions.
    fn at(&self, row: i64, col: i64, ch: usize) -> f32 {
        let inside = row >= 0 && col >= 0 && (row as usize) < self.h && (col as usize) < self.w;
        let (r, c) = match (inside, self.fill) {
            (true, _) => (row as usize, col as usize),
            (false, Fill::Constant(v)) => return v,
            (false, Fill::NearestEdge) => (
                row.clamp(0, self.h as i64 - 1) as usize,
                col.clamp(0, self.w as i64 - 1) as usize,
            ),
        };
        self.data[(r * self.w + c) * self.c + ch]
    }

    fn nearest(&self, y: f64, x: f64, out: &mut [f32]) {
        let (r, c) = (y.round() as i64, x.round() as i64);
        for (ch, o) in out.iter_mut().enumerate() {
            *o = self.at(r, c, ch);
        }
    }

    fn bilinear(&self, y: f64, x: f64, out: &mut [f32]) {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (r, c) = (y0 as i64, x0 as i64);
        for (ch, o) in out.iter_mut().enumerate() {
            let p00 = self.at(r, c, ch);
            if fy == 0.0 && fx == 0.0 {
                *o = p00;
                continue;
            }
            let p01 = self.at(r, c + 1, ch);
            let p10 = self.at(r + 1, c, ch);
            let p11 = self.at(r + 1, c + 1, ch);
            let v = (1.0 - fy) * ((1.0 - fx) * p00 as f64 + fx * p01 as f64)
                + fy * ((1.0 - fx) * p10 as f64 + fx * p11 as f64);
            let lo = p00.min(p01).min(p10).min(p11);
            let hi = p00.max(p01).max(p10).max(p11);
            *o = (v as f32).clamp(lo, hi);
        }
    }
}

/// Warp an `[H, W, C]` image by inverse mapping each output pixel.
pub fn apply_affine(image: &Tensor, p: &AffineParams, cfg: &AugmentConfig) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::invalid("apply_affine", format!("expected [H, W, C] image, got {:?}", image.shape())));
    };
    if image.is_empty() {
        return Err(Error::invalid("apply_affine", "empty image"));
    }
    if p.is_identity() {
        return Ok(image.clone());
    }
    let inv = invert_affine(&forward_matrix(p, h, w));
    let sampler = Sampler {
        data: image.data(),
        h,
        w,
        c,
        fill: cfg.fill,
    };
    let mut out = vec![0.0f32; image.len()];
    for (row, line) in out.chunks_mut(w * c).enumerate() {
        for (col, px) in line.chunks_mut(c).enumerate() {
            let (xo, yo) = (col as f64, row as f64);
            let x = inv[0][0] * xo + inv[0][1] * yo + inv[0][2];
            let y = inv[1][0] * xo + inv[1][1] * yo + inv[1][2];
            match cfg.interpolation {
                Interpolation::Bilinear => sampler.bilinear(y, x, px),
                Interpolation::Nearest => sampler.nearest(y, x, px),
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one sample in one epoch.
pub fn sample_seed(global_seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ epoch) ^ index)
}

/// Augment one image with the transform drawn from its derived seed.
pub fn augment_one(
    image: &Tensor,
    cfg: &AugmentConfig,
    global_seed: u64,
    epoch: u64,
    index: u64,
) -> Result<(Tensor, AffineParams)> {
    if cfg.is_identity() {
        return Ok((image.clone(), AffineParams::IDENTITY));
    }
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("augment", format!("expected [H, W, C] image, got {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, epoch, index));
    let p = sample_params(cfg, (shape[0], shape[1]), &mut rng);
    Ok((apply_affine(image, &p, cfg)?, p))
}

/// Augment every sample in parallel; results depend only on
/// `(global_seed, epoch, position)`, and labels pass through untouched.
pub fn augment_stream<L: Clone + Send + Sync>(
    samples: &[(Tensor, L)],
    cfg: &AugmentConfig,
    global_seed: u64,
    epoch: u64,
) -> Result<Vec<(Tensor, L)>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, (img, label))| Ok((augment_one(img, cfg, global_seed, epoch, i as u64)?.0, label.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
    }

    fn pixel(t: &Tensor, r: usize, c: usize) -> f32 {
        t.data()[r * t.shape()[1] + c]
    }

    #[test]
    fn zero_ranges_give_identity_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_params(&AugmentConfig::identity(), (10, 10), &mut rng);
        assert!(p.is_identity());
    }

    #[test]
    fn params_are_deterministic_and_in_range() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&cfg, (150, 150), &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_params(&cfg, (150, 150), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let p = sample_params(&cfg, (150, 100), &mut rng);
            assert!(p.theta.abs() <= 15.0 && p.shear.abs() <= 10.0);
            assert!((0.9..=1.1).contains(&p.zoom));
            assert!(p.tx.abs() <= 10.0 && p.ty.abs() <= 15.0);
        }
    }

    #[test]
    fn rotation_draws_are_uniform_over_range() {
        let cfg = AugmentConfig {
            rotation_max: 15.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_params(&cfg, (8, 8), &mut rng).theta).collect();
        let min = draws.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(min >= -15.0 && max <= 15.0);
        // uniform on [-15, 15]: the range is nearly covered
        assert!(min < -14.9 && max > 14.9);
        assert!(mean.abs() <= 0.5, "mean {mean}");
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = random_image(7, 9, 3, 1);
        let out = apply_affine(&img, &AffineParams::IDENTITY, &AugmentConfig::default()).unwrap();
        assert_eq!(out, img);
        let (out, _) = augment_one(&img, &AugmentConfig::identity(), 1, 2, 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = random_image(6, 5, 2, 2);
        let p = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        let cfg = AugmentConfig::default();
        let once = apply_affine(&img, &p, &cfg).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.data()[0..2], img.data()[8..10]);
        assert_eq!(apply_affine(&once, &p, &cfg).unwrap(), img);
    }

    #[test]
    fn quarter_turn_matches_coordinate_permutation() {
        let img = Tensor::new(vec![3, 3, 1], (1..=9).map(|v| v as f32).collect()).unwrap();
        let p = AffineParams {
            theta: 90.0,
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p, &AugmentConfig::default()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(pixel(&out, r, c), pixel(&img, c, 2 - r));
            }
        }
    }

    #[test]
    fn integral_shift_matches_oracle() {
        let img = random_image(6, 6, 1, 4);
        let p = AffineParams {
            tx: 2.0,
            ty: -1.0,
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p, &AugmentConfig::default()).unwrap();
        for r in 0..6usize {
            for c in 0..6usize {
                let sr = (r as i64 + 1).clamp(0, 5) as usize;
                let sc = (c as i64 - 2).clamp(0, 5) as usize;
                assert_eq!(pixel(&out, r, c), pixel(&img, sr, sc));
            }
        }
    }

    #[test]
    fn constant_fill_outside() {
        let img = Tensor::ones(&[4, 4, 1]);
        let cfg = AugmentConfig {
            fill: Fill::Constant(-1.0),
            ..AugmentConfig::default()
        };
        let p = AffineParams {
            tx: 2.0,
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p, &cfg).unwrap();
        assert_eq!(pixel(&out, 0, 0), -1.0);
        assert_eq!(pixel(&out, 0, 3), 1.0);
    }

    #[test]
    fn output_stays_within_input_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..20 {
            let img = random_image(12, 10, 3, seed);
            let p = sample_params(&cfg, (12, 10), &mut rng);
            let out = apply_affine(&img, &p, &cfg).unwrap();
            assert_eq!(out.shape(), img.shape());
            let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(out.data().iter().all(|&v| (lo..=hi).contains(&v)));
        }
    }

    #[test]
    fn stream_is_deterministic_and_keeps_labels() {
        let samples: Vec<(Tensor, usize)> = (0..8).map(|i| (random_image(8, 8, 1, i), i as usize % 3)).collect();
        let cfg = AugmentConfig::default();
        let a = augment_stream(&samples, &cfg, 11, 2).unwrap();
        let b = augment_stream(&samples, &cfg, 11, 2).unwrap();
        let c = augment_stream(&samples, &cfg, 11, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let labels: Vec<usize> = a.iter().map(|s| s.1).collect();
        assert_eq!(labels, samples.iter().map(|s| s.1).collect::<Vec<_>>());
        let same = augment_stream(&samples, &AugmentConfig::identity(), 11, 2).unwrap();
        assert_eq!(same, samples);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = AugmentConfig {
            zoom_range: 1.0,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.zoom_range = 0.1;
        cfg.rotation_max = -1.0;
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
