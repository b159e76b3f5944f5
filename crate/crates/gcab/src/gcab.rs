//! Gated Class-Attention Block: task-conditioned masked decoder with
//! per-task classifier heads.
//!
//! Gating sites: the class-token/input channel mask gates the attention
//! inputs, queries/keys, values, MLP input and classifier input (they all
//! alias one learned mask); a second learned mask gates the MLP hidden
//! channel.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masks::compute_mask;
use crate::tape::{Tape, Var, VarMap};
use crate::tensor::Tensor;
use crate::vit::{attention_core, init_uniform, Arch};

/// Tape-bound masks for one task: `m_i` over the input/class-token channel
/// (aliased by the QK, V, MLP-input and output sites) and `m_2` over the
/// MLP hidden channel.
#[derive(Clone, Copy)]
pub struct MaskVars {
    pub m_i: Var,
    pub m_2: Var,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    init_uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

/// Insert the decoder parameters (everything except the per-task heads).
pub fn init_gcab(
    store: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    arch: &Arch,
    rng: &mut impl Rng,
) {
    let d = arch.embed_dim;
    let h = arch.mlp_hidden();
    let mut put = |name: &str, t: Tensor| {
        store.insert(format!("{prefix}.{name}"), t);
    };
    put("theta", init_uniform(rng, 1, d, 0.02));
    put("wq", xavier(rng, d, d));
    put("bq", Tensor::zeros(1, d));
    put("wk", xavier(rng, d, d));
    put("bk", Tensor::zeros(1, d));
    put("wv", xavier(rng, d, d));
    put("bv", Tensor::zeros(1, d));
    put("wo", xavier(rng, d, d));
    put("bo", Tensor::zeros(1, d));
    put("w1", xavier(rng, d, h));
    put("b1", Tensor::zeros(1, h));
    put("w2", xavier(rng, h, d));
    put("b2", Tensor::zeros(1, d));
    // small symmetric init keeps sigma(s*A) near 0.5 at s = 1
    put("mask_a_i", init_uniform(rng, d, arch.max_tasks, 0.1));
    put("mask_a_2", init_uniform(rng, h, arch.max_tasks, 0.1));
}

/// Add the classifier head for a task.
pub fn add_head(
    store: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    task: usize,
    classes: usize,
    rng: &mut impl Rng,
) {
    let d = store[&format!("{prefix}.theta")].cols();
    store.insert(format!("{prefix}.head{task}.w"), xavier(rng, d, classes));
    store.insert(format!("{prefix}.head{task}.b"), Tensor::zeros(1, classes));
}

/// Both task masks evaluated at scale `s`.
pub fn task_masks(tape: &mut Tape, vm: &VarMap, prefix: &str, task: usize, s: f64) -> Result<MaskVars> {
    let a_i = vm.get(&format!("{prefix}.mask_a_i"))?;
    let a_2 = vm.get(&format!("{prefix}.mask_a_2"))?;
    Ok(MaskVars { m_i: compute_mask(tape, a_i, task, s)?, m_2: compute_mask(tape, a_2, task, s)? })
}

/// Constant all-ones masks (ungated class-attention).
pub fn ones_masks(tape: &mut Tape, arch: &Arch) -> MaskVars {
    let m_i = tape.constant(Tensor::ones(1, arch.embed_dim));
    let m_2 = tape.constant(Tensor::ones(1, arch.mlp_hidden()));
    MaskVars { m_i, m_2 }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// The gated forward pass of the class-attention decoder:
///   p = [theta, b]
///   Q = W_q(theta*m_i), K = W_k(p*m_i), V = W_v(p*m_i)
///   A = softmax((Q*m_qk)(K*m_qk)^T / sqrt(d/h)),  O = W_o A (V*m_v)
///   b' = O + theta,  u = W_1(b'*m_1),  v = W_2(u*m_2),  f = v + O
/// with m_qk = m_v = m_1 = m_i.
pub fn gcab_forward(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    b: Var,
    masks: &MaskVars,
    arch: &Arch,
) -> Result<Var> {
    let d = arch.embed_dim;
    if tape.value(b).cols() != d {
        return Err(Error::shape("gcab_forward", format!("features {:?} vs embed_dim {}", tape.value(b).shape(), d)));
    }
    let g = |vm: &VarMap, n: &str| vm.get(&format!("{prefix}.{n}"));
    let theta = g(vm, "theta")?;
    let p = tape.concat_rows(&[theta, b])?;

    let theta_m = tape.mul_row(theta, masks.m_i)?;
    let p_m = tape.mul_row(p, masks.m_i)?;
    let q = linear(tape, theta_m, g(vm, "wq")?, g(vm, "bq")?)?;
    let k = linear(tape, p_m, g(vm, "wk")?, g(vm, "bk")?)?;
    let v = linear(tape, p_m, g(vm, "wv")?, g(vm, "bv")?)?;

    let q_m = tape.mul_row(q, masks.m_i)?;
    let k_m = tape.mul_row(k, masks.m_i)?;
    let v_m = tape.mul_row(v, masks.m_i)?;
    let merged = attention_core(tape, q_m, k_m, v_m, d, arch.heads)?;
    let o = linear(tape, merged, g(vm, "wo")?, g(vm, "bo")?)?;

    let b_res = tape.add(o, theta)?;
    let b_res_m = tape.mul_row(b_res, masks.m_i)?;
    let u = linear(tape, b_res_m, g(vm, "w1")?, g(vm, "b1")?)?;
    let u_m = tape.mul_row(u, masks.m_2)?;
    let vv = linear(tape, u_m, g(vm, "w2")?, g(vm, "b2")?)?;
    tape.add(vv, o)
}

/// Unmasked class-attention block on the same weight layout (the masks
/// simply never appear; numerically identical to all-ones gating).
pub fn cab_forward(tape: &mut Tape, vm: &VarMap, prefix: &str, b: Var, arch: &Arch) -> Result<Var> {
    let d = arch.embed_dim;
    let g = |vm: &VarMap, n: &str| vm.get(&format!("{prefix}.{n}"));
    let theta = g(vm, "theta")?;
    let p = tape.concat_rows(&[theta, b])?;
    let q = linear(tape, theta, g(vm, "wq")?, g(vm, "bq")?)?;
    let k = linear(tape, p, g(vm, "wk")?, g(vm, "bk")?)?;
    let v = linear(tape, p, g(vm, "wv")?, g(vm, "bv")?)?;
    let merged = attention_core(tape, q, k, v, d, arch.heads)?;
    let o = linear(tape, merged, g(vm, "wo")?, g(vm, "bo")?)?;
    let b_res = tape.add(o, theta)?;
    let u = linear(tape, b_res, g(vm, "w1")?, g(vm, "b1")?)?;
    let vv = linear(tape, u, g(vm, "w2")?, g(vm, "b2")?)?;
    tape.add(vv, o)
}

/// logits = W_clf(f * m_o) for the given task's head, with optional layer
/// normalization of f first.
pub fn classify(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    f: Var,
    m_o: Var,
    task: usize,
    arch: &Arch,
) -> Result<Var> {
    let wname = format!("{prefix}.head{task}.w");
    if !vm.contains(&wname) {
        return Err(Error::State(format!("no classifier head for task {task}")));
    }
    let f = if arch.classifier_layernorm { tape.layer_norm_rows(f)? } else { f };
    let fm = tape.mul_row(f, m_o)?;
    linear(tape, fm, vm.get(&wname)?, vm.get(&format!("{prefix}.head{task}.b"))?)
}

/// One decoder pass for each task `0..passes`, on pre-compensated features
/// per pass, concatenated into a single logit row over all seen classes.
pub fn multi_pass_logits(
    tape: &mut Tape,
    vm: &VarMap,
    prefix: &str,
    features_per_pass: &[Var],
    scales: &[f64],
    arch: &Arch,
) -> Result<Var> {
    if features_per_pass.is_empty() || features_per_pass.len() != scales.len() {
        return Err(Error::State("multi_pass_logits: empty or misaligned pass inputs".into()));
    }
    let mut parts = Vec::with_capacity(features_per_pass.len());
    for (t, (&feat, &s)) in features_per_pass.iter().zip(scales).enumerate() {
        let masks = task_masks(tape, vm, prefix, t, s)?;
        let f = gcab_forward(tape, vm, prefix, feat, &masks, arch)?;
        parts.push(classify(tape, vm, prefix, f, masks.m_i, t, arch)?);
    }
    tape.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Arch {
        Arch {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            embed_dim: 4,
            heads: 1,
            blocks: 1,
            mlp_ratio: 2.0,
            classifier_layernorm: false,
            max_tasks: 3,
        }
    }

    fn setup(seed: u64) -> (BTreeMap<String, Tensor>, Arch) {
        let a = arch();
        let mut store = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_gcab(&mut store, "gcab", &a, &mut rng);
        add_head(&mut store, "gcab", 0, 3, &mut rng);
        (store, a)
    }

    #[test]
    fn all_ones_masks_equal_unmasked_cab() {
        let (store, a) = setup(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feats = init_uniform(&mut rng, 3, 4, 1.0);

        let run = |gated: bool| {
            let mut tape = Tape::new(Precision::F64);
            let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
            let b = tape.constant(feats.clone());
            let f = if gated {
                let masks = ones_masks(&mut tape, &a);
                gcab_forward(&mut tape, &vm, "gcab", b, &masks, &a).unwrap()
            } else {
                cab_forward(&mut tape, &vm, "gcab", b, &a).unwrap()
            };
            tape.value(f).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_input_mask_gives_uniform_attention_query() {
        let (mut store, a) = setup(13);
        // zero biases so the zero-query trace is exact
        for (name, t) in store.iter_mut() {
            if name.contains(".b") && !name.contains("head") {
                *t = Tensor::zeros(t.rows(), t.cols());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feats = init_uniform(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let b = tape.constant(feats.clone());
        let m_i = tape.constant(Tensor::zeros(1, 4));
        let m_2 = tape.constant(Tensor::ones(1, 8));
        let f = gcab_forward(&mut tape, &vm, "gcab", b, &MaskVars { m_i, m_2 }, &a).unwrap();

        // hand trace: Q = 0 -> uniform attention over N+1 tokens, but
        // V inputs are also masked to zero, so O = 0; b' = theta;
        // b'*m_1 = 0 -> u = 0 -> v = 0; f = v + O = 0.
        assert!(tape.value(f).data().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn classify_identity_and_zero_mask() {
        let (mut store, a) = setup(15);
        // identity-like head: first 3 columns of the 4x3 identity
        let mut w = Tensor::zeros(4, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        store.insert("gcab.head0.w".into(), w);
        let f_val = Tensor::row(vec![0.3, -0.7, 0.9, 0.2]);

        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let f = tape.constant(f_val.clone());
        let ones = tape.constant(Tensor::ones(1, 4));
        let logits = classify(&mut tape, &vm, "gcab", f, ones, 0, &a).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.3, -0.7, 0.9]);

        let zeros = tape.constant(Tensor::zeros(1, 4));
        let logits0 = classify(&mut tape, &vm, "gcab", f, zeros, 0, &a).unwrap();
        assert!(tape.value(logits0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn classify_random_matches_hand_product() {
        let (mut store, a) = setup(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = init_uniform(&mut rng, 4, 3, 1.0);
        store.insert("gcab.head0.w".into(), w.clone());
        store.insert("gcab.head0.b".into(), Tensor::zeros(1, 3));
        let f_val = init_uniform(&mut rng, 1, 4, 1.0);
        let m_val = init_uniform(&mut rng, 1, 4, 1.0).map(f64::abs);

        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let f = tape.constant(f_val.clone());
        let m = tape.constant(m_val.clone());
        let logits = classify(&mut tape, &vm, "gcab", f, m, 0, &a).unwrap();

        let masked = f_val.zip(&m_val, |x, y| x * y).unwrap();
        let want = masked.matmul(&w).unwrap();
        assert!(tape.value(logits).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn missing_head_is_error() {
        let (store, a) = setup(18);
        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let f = tape.constant(Tensor::row(vec![0.0; 4]));
        let ones = tape.constant(Tensor::ones(1, 4));
        assert!(classify(&mut tape, &vm, "gcab", f, ones, 2, &a).is_err());
    }

    #[test]
    fn multi_pass_width_bookkeeping() {
        let (mut store, a) = setup(19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        add_head(&mut store, "gcab", 1, 2, &mut rng);
        add_head(&mut store, "gcab", 2, 4, &mut rng);
        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let b = tape.constant(init_uniform(&mut rng, 3, 4, 1.0));
        let logits = multi_pass_logits(&mut tape, &vm, "gcab", &[b, b, b], &[800.0; 3], &a).unwrap();
        assert_eq!(tape.value(logits).shape(), (1, 3 + 2 + 4));
    }

    #[test]
    fn multi_pass_single_task_equals_head_logits() {
        let (store, a) = setup(21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let feats = init_uniform(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, store.iter(), |_| false);
        let b = tape.constant(feats.clone());
        let concat = multi_pass_logits(&mut tape, &vm, "gcab", &[b], &[800.0], &a).unwrap();
        let masks = task_masks(&mut tape, &vm, "gcab", 0, 800.0).unwrap();
        let f = gcab_forward(&mut tape, &vm, "gcab", b, &masks, &a).unwrap();
        let single = classify(&mut tape, &vm, "gcab", f, masks.m_i, 0, &a).unwrap();
        assert_eq!(tape.value(concat), tape.value(single));
    }
}
