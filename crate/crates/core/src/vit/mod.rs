//! Vision Transformer over a possibly sampled subset of tokens.
//!
//! Pipeline: patch embedding → class token + absolute position embedding →
//! (sampling) → pre-norm blocks with relative position bias → final norm →
//! linear head on the class token.

mod config;
mod relbias;

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use config::ViTConfig;
pub use relbias::RelBiasIndex;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Dense token batch plus the original token index of every row.
///
/// `kept[b][j]` is the original token number (0 = class token) of row `j`
/// of image `b`.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub tokens: Var,
    pub kept: Vec<Vec<usize>>,
    /// Set when the sampling block was bypassed (ρ = 1).
    pub skipped: bool,
}

impl TokenBatch {
    /// All `num_tokens` tokens in original order.
    pub fn full(tokens: Var, batch: usize, num_tokens: usize) -> Self {
        TokenBatch {
            tokens,
            kept: vec![(0..num_tokens).collect(); batch],
            skipped: true,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.kept.len()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.kept.first().map_or(0, Vec::len)
    }

    pub fn validate<T: Scalar>(&self, tape: &Tape<T>, num_tokens: usize) -> Result<()> {
        let shape = tape.shape(self.tokens);
        let k = self.tokens_per_image();
        if shape.len() != 3 || shape[0] != self.kept.len() || shape[1] != k {
            return Err(Error::dim("TokenBatch", shape, &[self.kept.len(), k]));
        }
        let mut seen = vec![usize::MAX; num_tokens];
        for (b, row) in self.kept.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Contract(format!("image {b} keeps {} tokens, expected {k}", row.len())));
            }
            for &t in row {
                if t >= num_tokens {
                    return Err(Error::Index {
                        op: "TokenBatch",
                        batch: b,
                        index: t,
                        bound: num_tokens,
                    });
                }
                if seen[t] == b {
                    return Err(Error::Contract(format!("image {b} keeps token {t} twice")));
                }
                seen[t] = b;
            }
            if !row.contains(&0) {
                return Err(Error::Contract(format!("image {b} dropped the class token")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    rel_bias: Option<ParamId>,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
}

/// Model parameters plus the fixed relative-bias index.
#[derive(Clone, Debug)]
pub struct ViT<T: Scalar> {
    config: ViTConfig,
    pub params: ParamStore<T>,
    layout: Layout,
    rel_index: RelBiasIndex,
}

struct Init<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::from_f64_lossy(v);
            }
        });
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v)))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.normal(format!("{prefix}.weight"), &[fan_in, fan_out])?,
            bias: self.constant(format!("{prefix}.bias"), &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.constant(format!("{prefix}.gain"), &[dim], 1.0)?,
            bias: self.constant(format!("{prefix}.bias"), &[dim], 0.0)?,
        })
    }
}

impl<T: Scalar> ViT<T> {
    /// Builds a model with truncated-normal weights drawn from `seed`.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.embed_dim;
        let rel_index = RelBiasIndex::new(config.grid());
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::generator(seed, rng::stream::INIT),
        };
        let patch_embed = init.linear("patch_embed", config.patch_dim(), l)?;
        let cls_token = init.normal("cls_token".into(), &[1, l])?;
        let pos_embed = if config.use_abs_pos {
            Some(init.normal("pos_embed".into(), &[config.num_tokens(), l])?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                norm1: init.norm(&format!("{p}.norm1"), l)?,
                qkv: init.linear(&format!("{p}.attn.qkv"), l, 3 * l)?,
                proj: init.linear(&format!("{p}.attn.proj"), l, l)?,
                rel_bias: if config.use_rel_bias {
                    Some(init.normal(format!("{p}.attn.rel_bias"), &[rel_index.table_rows(), config.heads])?)
                } else {
                    None
                },
                norm2: init.norm(&format!("{p}.norm2"), l)?,
                fc1: init.linear(&format!("{p}.mlp.fc1"), l, config.mlp_hidden())?,
                fc2: init.linear(&format!("{p}.mlp.fc2"), config.mlp_hidden(), l)?,
            });
        }
        let norm = init.norm("norm", l)?;
        let head = init.linear("head", l, config.num_classes)?;
        Ok(ViT {
            config,
            params: store,
            layout: Layout {
                patch_embed,
                cls_token,
                pos_embed,
                blocks,
                norm,
                head,
            },
            rel_index,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn rel_index(&self) -> &RelBiasIndex {
        &self.rel_index
    }

    /// Name of block `i`'s relative-bias table parameter.
    pub fn rel_bias_name(i: usize) -> String {
        format!("blocks.{i}.attn.rel_bias")
    }

    /// Rearranges `[B, C, H, W]` images into `[B, grid², C·p·p]` patch rows,
    /// patches in row-major grid order, each flattened as `(c, y, x)`.
    pub fn unfold_patches(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = c.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != s || shape[3] != s {
            return Err(Error::dim("patch_embed", shape, &[0, c.channels, s, s]));
        }
        let (b, p, g) = (shape[0], c.patch_size, c.grid());
        let src = images.data();
        let mut out = Vec::with_capacity(images.numel());
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..c.channels {
                        for y in 0..p {
                            let row = ((bi * c.channels + ch) * s + gy * p + y) * s + gx * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[b, g * g, c.patch_dim()], out)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, lin: &Linear) -> Result<Var> {
        let w = tape.param(&self.params, lin.weight);
        let bias = tape.param(&self.params, lin.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, bias)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: &Norm) -> Result<Var> {
        let g = tape.param(&self.params, n.gain);
        let b = tape.param(&self.params, n.bias);
        tape.layernorm(x, g, b, T::from_f64_lossy(LN_EPS))
    }

    /// Shared linear map of every non-overlapping patch: `[B, grid², L]`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let patches = self.unfold_patches(images)?;
        let x = tape.constant(patches);
        self.linear(tape, x, &self.layout.patch_embed)
    }

    /// Prepends the class token and adds absolute position embeddings,
    /// giving `[B, P, L]` in original token order.
    pub fn prepend_class_and_pos(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 3 || shape[1] != self.config.num_patches() || shape[2] != self.config.embed_dim {
            return Err(Error::dim(
                "prepend_class_and_pos",
                &shape,
                &[0, self.config.num_patches(), self.config.embed_dim],
            ));
        }
        let cls = tape.param(&self.params, self.layout.cls_token);
        let cls = tape.broadcast_batch(cls, shape[0])?;
        let x = tape.concat(&[cls, patches], 1)?;
        match self.layout.pos_embed {
            Some(pos) => {
                let pos = tape.param(&self.params, pos);
                tape.add(x, pos)
            }
            None => Ok(x),
        }
    }

    /// `patch_embed` followed by `prepend_class_and_pos`.
    pub fn embed(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        let p = self.patch_embed(tape, images)?;
        self.prepend_class_and_pos(tape, p)
    }

    /// One pre-norm transformer block: `x + MHSA(LN(x))`, then
    /// `x + MLP(LN(x))`. `bias_rows` comes from [`RelBiasIndex::gather`]
    /// over the batch's kept indices.
    pub fn attention_block(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        batch: &TokenBatch,
        bias_rows: &Rc<Vec<u32>>,
    ) -> Result<TokenBatch> {
        let blk = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no block {layer}")))?;
        let (b, k) = (batch.batch_size(), batch.tokens_per_image());
        let (l, h, d) = (self.config.embed_dim, self.config.heads, self.config.head_dim());
        let x = batch.tokens;

        let hn = self.norm(tape, x, &blk.norm1)?;
        let qkv = self.linear(tape, hn, &blk.qkv)?;
        let qkv = tape.reshape(qkv, &[b, k, 3, h, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut split = [qkv; 3];
        for (i, s) in split.iter_mut().enumerate() {
            let part = tape.narrow(qkv, 0, i, 1)?;
            *s = tape.reshape(part, &[b, h, k, d])?;
        }
        let [q, kt, v] = split;
        let q = tape.scale(q, T::one() / T::from_usize_lossy(d).sqrt());
        let mut logits = tape.matmul_t(q, kt, false, true)?;
        if let Some(table) = blk.rel_bias {
            let table = tape.param(&self.params, table);
            logits = tape.add_rel_bias(logits, table, Rc::clone(bias_rows))?;
        }
        let attn = tape.softmax(logits, 3)?;
        let o = tape.matmul(attn, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, k, l])?;
        let o = self.linear(tape, o, &blk.proj)?;
        let x = tape.add(x, o)?;

        let hn = self.norm(tape, x, &blk.norm2)?;
        let hidden = self.linear(tape, hn, &blk.fc1)?;
        let hidden = tape.gelu(hidden);
        let out = self.linear(tape, hidden, &blk.fc2)?;
        let x = tape.add(x, out)?;
        Ok(TokenBatch {
            tokens: x,
            kept: batch.kept.clone(),
            skipped: batch.skipped,
        })
    }

    /// Logits `[B, num_classes]` read from the class-token row.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        batch.validate(tape, self.config.num_tokens())?;
        let rows = self.rel_index.gather(&batch.kept);
        let mut cur = batch.clone();
        for layer in 0..self.config.depth {
            cur = self.attention_block(tape, layer, &cur, &rows)?;
        }
        let cls_rows: Vec<Vec<usize>> = cur
            .kept
            .iter()
            .map(|row| vec![row.iter().position(|&t| t == 0).expect("validated")])
            .collect();
        let b = cur.batch_size();
        let cls = tape.gather_rows(cur.tokens, &cls_rows)?;
        let cls = tape.reshape(cls, &[b, self.config.embed_dim])?;
        let cls = self.norm(tape, cls, &self.layout.norm)?;
        self.linear(tape, cls, &self.layout.head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            use_rel_bias: true,
            use_abs_pos: true,
        }
    }

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let m = ViT::<f32>::new(tiny(), 0).unwrap();
        for name in [
            "patch_embed.weight",
            "cls_token",
            "pos_embed",
            "blocks.0.attn.rel_bias",
            "blocks.0.mlp.fc2.bias",
            "head.weight",
        ] {
            assert!(m.params.by_name(name).is_some(), "{name}");
        }
        assert_eq!(m.params.by_name("blocks.0.attn.rel_bias").unwrap().value.shape(), &[12, 2]);
    }

    #[test]
    fn unfold_orders_patches_row_major() {
        let m = ViT::<f32>::new(tiny(), 0).unwrap();
        let img = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32);
        let p = m.unfold_patches(&img).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16]);
        // patch 1 is the top-right block: first row starts at column 4
        assert_eq!(&p.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
        // patch 2 starts at row 4, column 0
        assert_eq!(p.data()[32], 32.0);
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let m = ViT::<f32>::new(tiny(), 0).unwrap();
        let mut tape = Tape::new();
        let img = Tensor::zeros(&[1, 1, 12, 12]);
        assert!(matches!(m.patch_embed(&mut tape, &img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn token_batch_rejects_missing_class_token() {
        let m = ViT::<f32>::new(tiny(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8]));
        let batch = TokenBatch {
            tokens: x,
            kept: vec![vec![1, 2]],
            skipped: false,
        };
        assert!(m.forward(&mut tape, &batch).is_err());
    }
}
