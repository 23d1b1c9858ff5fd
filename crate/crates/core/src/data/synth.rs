//! Synthetic localized-evidence images.
//!
//! Every image is faint uniform noise (amplitude 0.1) with a class-specific
//! high-contrast glyph stamped into 2–4 random grid cells. Only the stamped
//! cells carry label information, and their locations are recorded.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const NOISE_AMPLITUDE: f32 = 0.1;
pub const GLYPH_AMPLITUDE: f32 = 1.0;
const MIN_STAMPS: usize = 2;
const MAX_STAMPS: usize = 4;
const SALIENCE_FLOOR: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synth_classes", "need at least 2 classes"));
        }
        if self.n == 0 {
            return Err(Error::config("synth_n", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        let cells = (self.image_size / self.patch_size).pow(2);
        if cells < MAX_STAMPS + 1 {
            return Err(Error::config("image_size", "grid too small for glyph stamping"));
        }
        Ok(())
    }
}

/// Glyph membership at normalized cell coordinates `(u, v)` ∈ (0, 1)².
fn glyph(class: usize, u: f32, v: f32, extra: &[Vec<bool>], p: usize, x: usize, y: usize) -> bool {
    const W: f32 = 0.2;
    let hbar = (v - 0.5).abs() < W;
    let vbar = (u - 0.5).abs() < W;
    let diag = (u - v).abs() < W;
    let anti = (u + v - 1.0).abs() < W;
    match class {
        0 => hbar,
        1 => vbar,
        2 => diag,
        3 => anti,
        4 => hbar || vbar,
        5 => diag || anti,
        6 => u.min(v).min(1.0 - u).min(1.0 - v) < W,
        7 => (u - 0.5).abs() < 0.26 && (v - 0.5).abs() < 0.26,
        c => extra[c - 8][y * p + x],
    }
}

fn generate(cfg: &SynthConfig, stream: u64, name: &str) -> Result<Dataset> {
    cfg.validate()?;
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let g = s / p;
    let mut rng = rng::generator(cfg.seed, stream);
    // classes beyond the eight drawn glyphs get fixed random masks
    let mut mask_rng = rng::generator(cfg.seed, rng::stream::SYNTH);
    let extra: Vec<Vec<bool>> = (8..cfg.num_classes.max(8))
        .map(|_| (0..p * p).map(|_| mask_rng.gen_bool(0.5)).collect())
        .collect();
    let masks: Vec<Vec<bool>> = (0..cfg.num_classes)
        .map(|class| {
            let mut m = Vec::with_capacity(p * p);
            for y in 0..p {
                for x in 0..p {
                    let (u, v) = ((x as f32 + 0.5) / p as f32, (y as f32 + 0.5) / p as f32);
                    m.push(glyph(class, u, v, &extra, p, x, y));
                }
            }
            m
        })
        .collect();

    let mut data = Vec::with_capacity(cfg.n * c * s * s);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut cells_all = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let label = i % cfg.num_classes;
        let stamps = rng.gen_range(MIN_STAMPS..=MAX_STAMPS);
        let mut cells = sample_indices(&mut rng, g * g, stamps).into_vec();
        cells.sort_unstable();
        let mut img: Vec<f32> = (0..c * s * s).map(|_| rng.gen::<f32>() * NOISE_AMPLITUDE).collect();
        for &cell in &cells {
            let (gy, gx) = (cell / g, cell % g);
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        if masks[label][y * p + x] {
                            img[(ch * s + gy * p + y) * s + gx * p + x] = GLYPH_AMPLITUDE;
                        }
                    }
                }
            }
        }
        data.extend(img);
        labels.push(label);
        cells_all.push(cells);
    }
    let mut ds = Dataset::new(name, cfg.seed, Tensor::new(&[cfg.n, c, s, s], data)?, labels, cfg.num_classes)?;
    ds.salient_cells = Some(cells_all);

    let frac = salience_fraction(&ds, p, 64, cfg.seed, 256);
    if frac < SALIENCE_FLOOR {
        return Err(Error::Contract(format!(
            "synthetic glyph cells dominate noise cells in only {:.1}% of images",
            100.0 * frac
        )));
    }
    Ok(ds)
}

/// Generates a synthetic dataset; a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    generate(cfg, rng::stream::SYNTH + 16, "synth")
}

/// Train set from `cfg` plus an independent held-out set of `test_n` images.
pub fn synth_split(cfg: &SynthConfig, test_n: usize) -> Result<(Dataset, Dataset)> {
    let train = synth_generate(cfg)?;
    let test_cfg = SynthConfig {
        n: test_n,
        ..cfg.clone()
    };
    let test = generate(&test_cfg, rng::stream::SYNTH + 17, "synth-test")?;
    Ok((train, test))
}

/// Fraction of (up to `limit`) images whose stamped cells all have strictly
/// larger L1 norm than every noise cell after a random Gaussian linear
/// embedding of width `embed_dim`.
pub fn salience_fraction(ds: &Dataset, patch_size: usize, embed_dim: usize, seed: u64, limit: usize) -> f64 {
    let Some(cells) = &ds.salient_cells else {
        return 0.0;
    };
    let (c, s) = (ds.channels(), ds.image_size());
    let g = s / patch_size;
    let dim = c * patch_size * patch_size;
    let mut rng = rng::generator(seed, rng::stream::SYNTH + 1);
    let w: Vec<f32> = (0..dim * embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = ds.len().min(limit);
    let per = c * s * s;
    let mut ok = 0;
    let mut patch = vec![0f32; dim];
    for (i, stamped) in cells.iter().enumerate().take(n) {
        let img = &ds.images.data()[i * per..(i + 1) * per];
        let mut min_stamped = f32::INFINITY;
        let mut max_noise = f32::NEG_INFINITY;
        for cell in 0..g * g {
            let (gy, gx) = (cell / g, cell % g);
            let mut o = 0;
            for ch in 0..c {
                for y in 0..patch_size {
                    let row = (ch * s + gy * patch_size + y) * s + gx * patch_size;
                    patch[o..o + patch_size].copy_from_slice(&img[row..row + patch_size]);
                    o += patch_size;
                }
            }
            let l1: f32 = (0..embed_dim)
                .map(|j| patch.iter().enumerate().map(|(d, &x)| x * w[d * embed_dim + j]).sum::<f32>().abs())
                .sum();
            if stamped.contains(&cell) {
                min_stamped = min_stamped.min(l1);
            } else {
                max_noise = max_noise.max(l1);
            }
        }
        if min_stamped > max_noise {
            ok += 1;
        }
    }
    ok as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            n,
            image_size: 32,
            patch_size: 4,
            channels: 3,
            seed: 5,
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_generate(&cfg(1000)).unwrap();
        let b = synth_generate(&cfg(1000)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 250);
        }
    }

    #[test]
    fn pixels_in_unit_range_and_cells_recorded() {
        let ds = synth_generate(&cfg(50)).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let cells = ds.salient_cells.as_ref().unwrap();
        assert!(cells.iter().all(|c| (2..=4).contains(&c.len()) && c.iter().all(|&i| i < 64)));
    }

    #[test]
    fn glyph_cells_dominate_after_random_embedding() {
        let ds = synth_generate(&cfg(400)).unwrap();
        assert!(salience_fraction(&ds, 4, 64, 11, 400) >= 0.95);
    }

    #[test]
    fn class_glyphs_are_distinct() {
        let p = 4;
        let masks: Vec<Vec<bool>> = (0..8)
            .map(|c| {
                (0..p * p)
                    .map(|i| glyph(c, ((i % p) as f32 + 0.5) / 4.0, ((i / p) as f32 + 0.5) / 4.0, &[], p, i % p, i / p))
                    .collect()
            })
            .collect();
        for a in 0..8 {
            assert!(masks[a].iter().any(|&m| m), "glyph {a} empty");
            for b in a + 1..8 {
                assert_ne!(masks[a], masks[b], "glyphs {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn indivisible_sizes_are_config_errors() {
        let mut c = cfg(10);
        c.image_size = 30;
        assert!(matches!(synth_generate(&c), Err(Error::Config { .. })));
    }
}
