//! Patch tokenizer and the M-block pre-norm transformer encoder.
//!
//! Block layout: x += SA(LN(x)); x += MLP(LN(x)). The output keeps the
//! patch-token shape NxD; the class token lives in the decoder only.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, VarMap};
use crate::tensor::Tensor;

/// Architecture hyperparameters shared by the backbone and decoder.
#[derive(Debug, Clone)]
pub struct Arch {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
    pub classifier_layernorm: bool,
    pub max_tasks: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("init shape")
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    init_uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Insert every backbone parameter under `prefix` into the store.
pub fn init_backbone(
    store: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    arch: &Arch,
    rng: &mut impl Rng,
) {
    let d = arch.embed_dim;
    let n = arch.num_patches();
    let pd = arch.patch_dim();
    let h = arch.mlp_hidden();
    let mut put = |name: String, t: Tensor| {
        store.insert(format!("{prefix}.{name}"), t);
    };
    put("tok.w".into(), xavier(rng, pd, d));
    put("tok.b".into(), Tensor::zeros(1, d));
    put("pos".into(), init_uniform(rng, n, d, 0.02));
    for b in 0..arch.blocks {
        put(format!("blk{b}.ln1.g"), Tensor::ones(1, d));
        put(format!("blk{b}.ln1.b"), Tensor::zeros(1, d));
        put(format!("blk{b}.wq"), xavier(rng, d, d));
        put(format!("blk{b}.bq"), Tensor::zeros(1, d));
        put(format!("blk{b}.wk"), xavier(rng, d, d));
        put(format!("blk{b}.bk"), Tensor::zeros(1, d));
        put(format!("blk{b}.wv"), xavier(rng, d, d));
        put(format!("blk{b}.bv"), Tensor::zeros(1, d));
        put(format!("blk{b}.wo"), xavier(rng, d, d));
        put(format!("blk{b}.bo"), Tensor::zeros(1, d));
        put(format!("blk{b}.ln2.g"), Tensor::ones(1, d));
        put(format!("blk{b}.ln2.b"), Tensor::zeros(1, d));
        put(format!("blk{b}.w1"), xavier(rng, d, h));
        put(format!("blk{b}.b1"), Tensor::zeros(1, h));
        put(format!("blk{b}.w2"), xavier(rng, h, d));
        put(format!("blk{b}.b2"), Tensor::zeros(1, d));
    }
}

/// Flatten an HxWxC image (row-major, channel-last) into the Nx(P*P*C)
/// patch matrix; patches ordered row-major over the patch grid, pixels
/// row-major within each patch.
pub fn patchify(image: &[f64], arch: &Arch) -> Result<Tensor> {
    let (h, w, c, p) = (arch.image_h, arch.image_w, arch.channels, arch.patch);
    if image.len() != h * w * c {
        return Err(Error::shape(
            "patchify",
            format!("image buffer {} != {}x{}x{}", image.len(), h, w, c),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(gh * gw * p * p * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (py * p + dy, px * p + dx);
                    for ch in 0..c {
                        data.push(image[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::new(gh * gw, p * p * c, data)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm_affine(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let scaled = tape.mul_row(n, g)?;
    tape.add_row(scaled, b)
}

/// Standard multi-head attention where `q_in` provides the queries and
/// `kv_in` the keys/values; logits scaled by 1/sqrt(D/h).
pub fn multi_head_attention(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    d: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, q_in, vm.get(&format!("{prefix}.wq"))?, vm.get(&format!("{prefix}.bq"))?)?;
    let k = linear(tape, kv_in, vm.get(&format!("{prefix}.wk"))?, vm.get(&format!("{prefix}.bk"))?)?;
    let v = linear(tape, kv_in, vm.get(&format!("{prefix}.wv"))?, vm.get(&format!("{prefix}.bv"))?)?;
    let o = attention_core(tape, q, k, v, d, heads)?;
    linear(tape, o, vm.get(&format!("{prefix}.wo"))?, vm.get(&format!("{prefix}.bo"))?)
}

/// Per-head scaled dot-product attention on pre-projected Q/K/V, merged
/// back to the full width (without the output projection).
pub fn attention_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    d: usize,
    heads: usize,
) -> Result<Var> {
    let dh = d / heads;
    let scale = 1.0 / (d as f64 / heads as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (lo, hi) = (hd * dh, (hd + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat_cols(&outs)
}

/// projection(patches) + position embedding.
pub fn tokenize(tape: &mut Tape, vm: &VarMap, prefix: &str, patches: Var) -> Result<Var> {
    let proj = linear(
        tape,
        patches,
        vm.get(&format!("{prefix}.tok.w"))?,
        vm.get(&format!("{prefix}.tok.b"))?,
    )?;
    tape.add(proj, vm.get(&format!("{prefix}.pos"))?)
}

/// The M encoder blocks on already-tokenized input.
pub fn encode(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    tokens: Var,
    arch: &Arch,
) -> Result<Var> {
    let mut x = tokens;
    for b in 0..arch.blocks {
        let bp = format!("{prefix}.blk{b}");
        let res = (|| -> Result<Var> {
            let ln1 = layer_norm_affine(
                tape,
                x,
                vm.get(&format!("{bp}.ln1.g"))?,
                vm.get(&format!("{bp}.ln1.b"))?,
            )?;
            let sa = multi_head_attention(tape, vm, &bp, ln1, ln1, arch.embed_dim, arch.heads)?;
            let x1 = tape.add(x, sa)?;
            let ln2 = layer_norm_affine(
                tape,
                x1,
                vm.get(&format!("{bp}.ln2.g"))?,
                vm.get(&format!("{bp}.ln2.b"))?,
            )?;
            let u = linear(tape, ln2, vm.get(&format!("{bp}.w1"))?, vm.get(&format!("{bp}.b1"))?)?;
            let u = tape.silu(u)?;
            let m = linear(tape, u, vm.get(&format!("{bp}.w2"))?, vm.get(&format!("{bp}.b2"))?)?;
            tape.add(x1, m)
        })();
        x = res.map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFinite { op: format!("{op} (encoder block {b})") },
            other => other,
        })?;
    }
    Ok(x)
}

/// Full backbone: patchify outside, then tokenize + encode.
pub fn backbone_forward(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    patches: Var,
    arch: &Arch,
) -> Result<Var> {
    let tokens = tokenize(tape, vm, prefix, patches)?;
    encode(tape, vm, prefix, tokens, arch)
}
