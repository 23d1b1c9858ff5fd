//! Evaluation surfaces: keep-rate sweeps, per-ρ iteration timing, spatial
//! keep frequencies, and kept-patch renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::sampling::{self, keep_count, KeepRate, SortSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{estimate_flops, train_step, AdamW, AdamWConfig};
use crate::vit::ViT;

/// Predictions for one batch of raw `[0, 1]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// Kept token numbers per image (0 = class token).
    pub kept: Vec<Vec<usize>>,
}

/// Inference at keep rate `rho`; at ρ = 1 the sampling block is skipped.
pub fn predict<T: Scalar>(model: &ViT<T>, images: &Tensor<f32>, norm: &Normalizer, rho: KeepRate, sort: SortSpec) -> Result<Predictions> {
    let x: Tensor<T> = norm.apply(images);
    let mut tape = Tape::new();
    let tokens = model.embed(&mut tape, &x)?;
    let batch = sampling::sample(&mut tape, tokens, rho.get(), sort, 0)?;
    let logits = model.forward(&mut tape, &batch)?;
    let c = model.config().num_classes;
    let mut classes = Vec::with_capacity(batch.batch_size());
    let mut probabilities = Vec::with_capacity(batch.batch_size());
    for row in tape.value(logits).data().chunks_exact(c) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let (best, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        classes.push(best);
        probabilities.push(1.0 / denom);
    }
    Ok(Predictions {
        classes,
        probabilities,
        kept: batch.kept,
    })
}

fn chunk_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(batch.max(1)).map(|s| (s, (s + batch).min(n))).collect()
}

/// Top-1 accuracy over `ds` at keep rate `rho`, sharding batches over up to
/// `threads` worker threads. The result does not depend on `threads`.
pub fn evaluate<T: Scalar>(
    model: &ViT<T>,
    ds: &Dataset,
    norm: &Normalizer,
    rho: KeepRate,
    sort: SortSpec,
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    let ranges = chunk_ranges(ds.len(), batch_size);
    let count_range = |&(s, e): &(usize, usize)| -> Result<usize> {
        let idx: Vec<usize> = (s..e).collect();
        let p = predict(model, &ds.gather(&idx)?, norm, rho, sort)?;
        Ok(p.classes.iter().zip(&ds.labels[s..e]).filter(|(a, b)| a == b).count())
    };
    let threads = threads.clamp(1, ranges.len().max(1));
    let correct: usize = if threads == 1 {
        ranges.iter().map(count_range).sum::<Result<usize>>()?
    } else {
        let per = ranges.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(count_range).sum::<Result<usize>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / ds.len() as f64)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile; sorts `values` in place.
pub fn quantile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let pos = q * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub rho: f64,
    pub k: usize,
    pub accuracy: f64,
    pub images_per_sec: f64,
    pub flops: u64,
}

/// Rows sorted by descending ρ.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "rho,k,accuracy,images_per_sec,flops";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.3},{}", r.rho, r.k, r.accuracy, r.images_per_sec, r.flops);
        }
        s
    }

    pub fn row(&self, rho: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.rho == rho)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub batch_size: usize,
    /// Timed passes per ρ (median reported); at least 3.
    pub timing_passes: usize,
    /// Batches per timed pass.
    pub timing_batches: usize,
    pub threads: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            batch_size: 64,
            timing_passes: 3,
            timing_batches: 2,
            threads: 1,
        }
    }
}

/// Accuracy, throughput and estimated FLOPs at each keep rate.
pub fn sweep<T: Scalar>(model: &ViT<T>, ds: &Dataset, norm: &Normalizer, rhos: &[f64], sort: SortSpec, opts: SweepOptions) -> Result<SweepResult> {
    let mut rates = rhos.iter().map(|&r| KeepRate::new(r)).collect::<Result<Vec<_>>>()?;
    rates.sort_by(|a, b| b.partial_cmp(a).expect("validated"));
    rates.dedup();
    let p = model.config().num_tokens();
    let timing_n = (opts.batch_size * opts.timing_batches.max(1)).min(ds.len());
    let timing_idx: Vec<usize> = (0..timing_n).collect();
    let timing_images = ds.gather(&timing_idx)?;
    let timing_chunks: Vec<Tensor<f32>> = chunk_ranges(timing_n, opts.batch_size)
        .into_iter()
        .map(|(s, e)| ds.gather(&timing_idx[s..e]))
        .collect::<Result<_>>()?;
    drop(timing_images);

    let mut rows = Vec::with_capacity(rates.len());
    for rho in rates {
        let accuracy = evaluate(model, ds, norm, rho, sort, opts.batch_size, opts.threads)?;
        // warmup pass excluded from timing
        predict(model, &timing_chunks[0], norm, rho, sort)?;
        let mut times = Vec::with_capacity(opts.timing_passes.max(3));
        for _ in 0..opts.timing_passes.max(3) {
            let start = Instant::now();
            for chunk in &timing_chunks {
                predict(model, chunk, norm, rho, sort)?;
            }
            times.push(start.elapsed().as_secs_f64());
        }
        let t = median(&mut times).expect("at least three passes");
        let k = keep_count(rho, p);
        rows.push(SweepRow {
            rho: rho.get(),
            k,
            accuracy,
            images_per_sec: timing_n as f64 / t.max(1e-12),
            flops: estimate_flops(model.config(), k),
        });
    }
    Ok(SweepResult { rows })
}

/// Per-grid-cell survival frequency at one keep rate.
#[derive(Clone, Debug, PartialEq)]
pub struct KeepFrequencyMap {
    pub rho: f64,
    pub grid: usize,
    /// Row-major `grid × grid` frequencies in `[0, 1]`.
    pub freq: Vec<f64>,
}

pub const KEEP_FREQ_HEADER: &str = "row,col,frequency";

impl KeepFrequencyMap {
    pub fn mean(&self) -> f64 {
        self.freq.iter().sum::<f64>() / self.freq.len() as f64
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.freq[row * self.grid + col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{KEEP_FREQ_HEADER}\n");
        for (i, f) in self.freq.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i / self.grid, i % self.grid, f);
        }
        s
    }
}

/// Kept token lists (original numbering) for every record of `ds`.
pub fn kept_tokens<T: Scalar>(model: &ViT<T>, ds: &Dataset, norm: &Normalizer, rho: KeepRate, sort: SortSpec, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(ds.len());
    for (s, e) in chunk_ranges(ds.len(), batch_size) {
        let idx: Vec<usize> = (s..e).collect();
        let x: Tensor<T> = norm.apply(&ds.gather(&idx)?);
        let mut tape = Tape::new();
        let tokens = model.embed(&mut tape, &x)?;
        if rho.is_full() {
            let n = tape.shape(tokens)[1];
            out.extend((s..e).map(|_| (0..n).collect::<Vec<_>>()));
        } else {
            out.extend(sampling::select(tape.value(tokens), rho, sort, 0)?);
        }
    }
    Ok(out)
}

/// How often each grid cell survives sampling at `rho` across `ds`.
pub fn keep_frequency<T: Scalar>(model: &ViT<T>, ds: &Dataset, norm: &Normalizer, rho: KeepRate, sort: SortSpec, batch_size: usize) -> Result<KeepFrequencyMap> {
    let grid = model.config().grid();
    let mut counts = vec![0u64; grid * grid];
    for kept in kept_tokens(model, ds, norm, rho, sort, batch_size)? {
        for t in kept.into_iter().filter(|&t| t > 0) {
            counts[t - 1] += 1;
        }
    }
    Ok(KeepFrequencyMap {
        rho: rho.get(),
        grid,
        freq: counts.iter().map(|&c| c as f64 / ds.len() as f64).collect(),
    })
}

/// Binary PPM (P6) of a `[C, H, W]` image in `[0, 1]`; channels beyond
/// three are ignored and a single channel is rendered as grey.
pub fn encode_ppm(image: &[f32], channels: usize, side: usize) -> Vec<u8> {
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    let plane = side * side;
    for px in 0..plane {
        for rgb in 0..3 {
            let ch = if channels >= 3 { rgb } else { 0 };
            out.push(to_byte(image[ch * plane + px]));
        }
    }
    out
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Zeroes every grid cell of `[C, H, W]` `image` whose token was dropped.
pub fn mask_image(image: &[f32], channels: usize, side: usize, patch: usize, kept: &[usize]) -> Vec<f32> {
    let grid = side / patch;
    let mut keep = vec![false; grid * grid];
    for &t in kept.iter().filter(|&&t| t > 0) {
        keep[t - 1] = true;
    }
    let mut out = image.to_vec();
    for ch in 0..channels {
        for y in 0..side {
            for x in 0..side {
                if !keep[(y / patch) * grid + x / patch] {
                    out[(ch * side + y) * side + x] = 0.0;
                }
            }
        }
    }
    out
}

/// Writes one PPM per `(image, ρ)`: dropped cells black, kept cells
/// original. File names carry image id, ρ, predicted class and its
/// probability.
pub fn render_masks<T: Scalar>(
    model: &ViT<T>,
    ds: &Dataset,
    image_ids: &[usize],
    norm: &Normalizer,
    rhos: &[f64],
    sort: SortSpec,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let images = ds.gather(image_ids)?;
    let c = model.config();
    let (ch, side) = (c.channels, c.image_size);
    let per = ch * side * side;
    let mut paths = Vec::new();
    for &r in rhos {
        let rho = KeepRate::new(r)?;
        let pred = predict(model, &images, norm, rho, sort)?;
        for (j, &id) in image_ids.iter().enumerate() {
            let img = &images.data()[j * per..(j + 1) * per];
            let masked = mask_image(img, ch, side, c.patch_size, &pred.kept[j]);
            let name = format!(
                "img{id:05}_rho{:.2}_pred{}_p{:.3}.ppm",
                rho.get(),
                pred.classes[j],
                pred.probabilities[j]
            );
            let path = out_dir.join(name);
            fs::write(&path, encode_ppm(&masked, ch, side)).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub rho: f64,
    pub k: usize,
    /// Whether the sort-and-gather path ran (false only for the ρ = 1 skip row).
    pub with_block: bool,
    pub median_seconds: f64,
    pub q1_seconds: f64,
    pub q3_seconds: f64,
}

impl BenchRow {
    pub fn iqr(&self) -> f64 {
        self.q3_seconds - self.q1_seconds
    }
}

pub const BENCH_HEADER: &str = "rho,k,with_block,median_s,q1_s,q3_s";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.rho, r.k, r.with_block, r.median_seconds, r.q1_seconds, r.q3_seconds
        );
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub batch_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub optim: AdamWConfig,
    pub sort: SortSpec,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch_size: 64,
            warmup: 5,
            iterations: 20,
            optim: AdamWConfig::default(),
            sort: SortSpec::magnitude(),
        }
    }
}

/// Times full training iterations (forward, backward, optimizer step) at
/// each fixed ρ on a copy of `model`. ρ = 1 yields two rows: the skipped
/// block and the forced gather. Rows are sorted by descending ρ.
pub fn bench_iteration_time<T: Scalar>(model: &ViT<T>, ds: &Dataset, norm: &Normalizer, rhos: &[f64], opts: BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rates = rhos.iter().map(|&r| KeepRate::new(r)).collect::<Result<Vec<_>>>()?;
    rates.sort_by(|a, b| b.partial_cmp(a).expect("validated"));
    rates.dedup();
    let idx: Vec<usize> = (0..opts.batch_size.min(ds.len())).collect();
    let images: Tensor<T> = norm.apply(&ds.gather(&idx)?);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let p = model.config().num_tokens();

    let mut variants = Vec::new();
    for rho in rates {
        if rho.is_full() {
            variants.push((rho, false));
        }
        variants.push((rho, true));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (rho, forced) in variants {
        let mut m = model.clone();
        let mut opt = AdamW::new(opts.optim, &m.params);
        let mut times = Vec::with_capacity(opts.iterations);
        for i in 0..opts.warmup + opts.iterations.max(1) {
            let start = Instant::now();
            train_step(&mut m, &mut opt, &images, &labels, rho, opts.sort, i as u64, opts.optim.lr, 0.0, true, forced)?;
            if i >= opts.warmup {
                times.push(start.elapsed().as_secs_f64());
            }
        }
        rows.push(BenchRow {
            rho: rho.get(),
            k: keep_count(rho, p),
            with_block: !rho.is_full() || forced,
            median_seconds: median(&mut times).expect("non-empty"),
            q1_seconds: quantile(&mut times, 0.25).expect("non-empty"),
            q3_seconds: quantile(&mut times, 0.75).expect("non-empty"),
        });
    }
    Ok(rows)
}
