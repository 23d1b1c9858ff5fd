//! Analytic FLOP model of one forward pass.
//!
//! Every matrix product is counted as 2 FLOPs per multiply-accumulate. With
//! `L` = embed dim, `H` = MLP hidden width, `k` = tokens kept, per image:
//!
//! | term        | FLOPs                 |
//! |-------------|-----------------------|
//! | QKV + out   | `2 · 4·k·L²` per block |
//! | attention   | `2 · 2·k²·L` per block (scores and weighted sum) |
//! | MLP         | `2 · 2·k·L·H` per block |
//! | patch embed | `2 · P_img·(C·p²)·L` (always over every patch) |
//! | head        | `2 · L·classes`       |
//!
//! Normalization, softmax, GELU and residual adds are not counted. A
//! training iteration is costed at three forward passes per image (forward
//! plus a backward pass of twice the forward cost).

use crate::vit::ViTConfig;

/// Forward FLOPs for one image keeping `k` tokens (class token included).
pub fn estimate_flops(config: &ViTConfig, k: usize) -> u64 {
    let k = k as u64;
    let l = config.embed_dim as u64;
    let hidden = config.mlp_hidden() as u64;
    let proj = 2 * 4 * k * l * l;
    let attn = 2 * 2 * k * k * l;
    let mlp = 2 * 2 * k * l * hidden;
    let blocks = config.depth as u64 * (proj + attn + mlp);
    let embed = 2 * (config.num_patches() * config.patch_dim() * config.embed_dim) as u64;
    let head = 2 * (config.embed_dim * config.num_classes) as u64;
    blocks + embed + head
}

/// Estimated FLOPs of one training iteration over `batch` images.
pub fn training_iteration_flops(config: &ViTConfig, k: usize, batch: usize) -> u64 {
    3 * batch as u64 * estimate_flops(config, k)
}
