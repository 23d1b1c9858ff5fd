//! Patch sampling block: score every image patch, sort, and keep the top
//! `k − 1` patches plus the class token as a dense `[B, k, L]` batch.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortKind {
    /// i.i.d. uniform scores from the counter-based generator.
    Random,
    /// L1 norm of each token embedding.
    Magnitude,
}

impl fmt::Display for SortKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortKind::Random => "random",
            SortKind::Magnitude => "magnitude",
        })
    }
}

impl FromStr for SortKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SortKind::Random),
            "magnitude" => Ok(SortKind::Magnitude),
            other => Err(Error::config("sort", format!("unknown sort kind {other:?}"))),
        }
    }
}

/// Patch sorting function, fixed for a whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SortSpec {
    pub kind: SortKind,
    pub seed: u64,
}

impl SortSpec {
    pub fn magnitude() -> Self {
        SortSpec {
            kind: SortKind::Magnitude,
            seed: 0,
        }
    }

    pub fn random(seed: u64) -> Self {
        SortSpec {
            kind: SortKind::Random,
            seed,
        }
    }
}

/// Patch keep rate ρ ∈ (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct KeepRate(f64);

impl KeepRate {
    pub const FULL: KeepRate = KeepRate(1.0);

    pub fn new(rho: f64) -> Result<Self> {
        if rho > 0.0 && rho <= 1.0 {
            Ok(KeepRate(rho))
        } else {
            Err(Error::Contract(format!("keep rate {rho} outside (0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_full(self) -> bool {
        self.0 >= 1.0
    }
}

impl fmt::Display for KeepRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Tokens kept per image: `round(ρ·P)` with halves rounded away from zero,
/// clamped to `[1, P]`.
///
/// The product is nudged by 1e-9 before rounding so that decimal halves such
/// as `0.7 × 65 = 45.5` round up despite binary representation error.
pub fn keep_count(rho: KeepRate, total_tokens: usize) -> usize {
    assert!(total_tokens >= 1, "keep_count needs at least one token");
    let k = (rho.get() * total_tokens as f64 + 1e-9).round() as usize;
    k.clamp(1, total_tokens)
}

/// L1 norm of every row: `[B, P, L]` → `[B, P]`.
pub fn score_magnitude<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim("score_magnitude", s, &[0, 0, 0]));
    }
    let l = s[2];
    let scores = x
        .data()
        .chunks_exact(l)
        .map(|row| row.iter().map(|v| v.abs()).sum())
        .collect();
    Tensor::new(&s[..2], scores)
}

/// Uniform (0, 1) scores keyed by `(seed, iteration, b, p)`.
pub fn score_random<T: Scalar>(batch: usize, patches: usize, seed: u64, iteration: u64) -> Tensor<T> {
    let draws = rng::uniform_block(seed, rng::stream::SORT_BASE + iteration, 0, batch * patches);
    Tensor::new(&[batch, patches], draws.into_iter().map(T::from_f64_lossy).collect())
        .expect("non-empty score shape")
}

/// Per-image indices ordered by non-increasing score, ties by ascending index.
pub fn argsort_desc<T: Scalar>(scores: &Tensor<T>) -> Vec<Vec<usize>> {
    let p = *scores.shape().last().expect("rank >= 1");
    scores
        .data()
        .chunks_exact(p)
        .map(|row| {
            let mut idx: Vec<usize> = (0..p).collect();
            // stable sort keeps ascending index order among equal scores
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            idx
        })
        .collect()
}

/// Per-image kept token numbers for `tokens [B, P, L]` (row 0 = class
/// token): the class token first, then the top `k − 1` patches in
/// descending score order.
pub fn select<T: Scalar>(tokens: &Tensor<T>, rho: KeepRate, sort: SortSpec, iteration: u64) -> Result<Vec<Vec<usize>>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::dim("sample", s, &[0, 2, 0]));
    }
    let (b, p, l) = (s[0], s[1], s[2]);
    let k = keep_count(rho, p);
    let scores: Tensor<T> = match sort.kind {
        SortKind::Magnitude => {
            let mut sc = Vec::with_capacity(b * (p - 1));
            for img in tokens.data().chunks_exact(p * l) {
                sc.extend(img[l..].chunks_exact(l).map(|row| row.iter().map(|v| v.abs()).sum::<T>()));
            }
            Tensor::new(&[b, p - 1], sc)?
        }
        SortKind::Random => score_random(b, p - 1, sort.seed, iteration),
    };
    Ok(argsort_desc(&scores)
        .into_iter()
        .map(|order| std::iter::once(0).chain(order.into_iter().take(k - 1).map(|i| i + 1)).collect())
        .collect())
}

/// The sampling block. At ρ = 1 the block is skipped: the input is returned
/// unchanged with identity indices and `skipped` set.
pub fn sample<T: Scalar>(tape: &mut Tape<T>, tokens: Var, rho: f64, sort: SortSpec, iteration: u64) -> Result<TokenBatch> {
    let rho = KeepRate::new(rho)?;
    if rho.is_full() {
        let s = tape.shape(tokens);
        return Ok(TokenBatch::full(tokens, s[0], s[1]));
    }
    sample_forced(tape, tokens, rho, sort, iteration)
}

/// Runs the sort-and-gather path even at ρ = 1.
pub fn sample_forced<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    rho: KeepRate,
    sort: SortSpec,
    iteration: u64,
) -> Result<TokenBatch> {
    let kept = select(tape.value(tokens), rho, sort, iteration)?;
    let gathered = tape.gather_rows(tokens, &kept)?;
    Ok(TokenBatch {
        tokens: gathered,
        kept,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_count_anchors() {
        let r = |v| KeepRate::new(v).unwrap();
        assert_eq!(keep_count(r(0.25), 16), 4);
        assert_eq!(keep_count(r(0.2), 197), 39);
        assert_eq!(keep_count(r(1.0), 197), 197);
        assert_eq!(keep_count(r(0.001), 10), 1);
        assert_eq!(keep_count(r(0.7), 65), 46);
    }

    #[test]
    fn keep_rate_bounds() {
        assert!(KeepRate::new(0.0).is_err());
        assert!(KeepRate::new(-0.5).is_err());
        assert!(KeepRate::new(1.5).is_err());
        assert!(KeepRate::new(f64::NAN).is_err());
    }

    #[test]
    fn magnitude_scores() {
        let x = Tensor::<f32>::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 3.0]).unwrap();
        assert_eq!(score_magnitude(&x).unwrap().data(), &[0.0, 6.0]);
    }

    #[test]
    fn argsort_examples() {
        let s = Tensor::<f32>::new(&[1, 3], vec![0.4, 0.1, 0.9]).unwrap();
        assert_eq!(argsort_desc(&s), vec![vec![2, 0, 1]]);
        let flat = Tensor::<f32>::full(&[1, 5], 0.5);
        assert_eq!(argsort_desc(&flat), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn rho_zero_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 2]));
        assert!(matches!(
            sample(&mut tape, x, 0.0, SortSpec::magnitude(), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn full_rate_skips_the_block() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 2]));
        let before = tape.len();
        let tb = sample(&mut tape, x, 1.0, SortSpec::magnitude(), 0).unwrap();
        assert!(tb.skipped);
        assert_eq!(tb.tokens, x);
        assert_eq!(tape.len(), before);
        assert_eq!(tb.kept, vec![vec![0, 1, 2, 3]; 2]);
    }

    #[test]
    fn composed_selection_example() {
        // token 0 is the class token; patch magnitudes 0.4, 0.1, 0.9
        let x = Tensor::<f32>::new(&[1, 4, 1], vec![5.0, 0.4, 0.1, 0.9]).unwrap();
        let rho = KeepRate::new(0.75).unwrap();
        assert_eq!(keep_count(rho, 4), 3);
        let kept = select(&x, rho, SortSpec::magnitude(), 0).unwrap();
        assert_eq!(kept, vec![vec![0, 3, 1]]);
    }
}
