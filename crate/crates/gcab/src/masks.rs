//! Mask lifecycle: scale annealing, cumulative accumulation, the sparsity
//! loss, weight-mask (gradient gate) construction, and capacity reporting.
//!
//! Two masks are physically learned, one over the class-token/input channel
//! (dim D) and one over the MLP hidden channel. The QK/V/1/o sites all alias
//! the input mask.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Elementwise-max union of all past task masks.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeMasks {
    /// Union gate over the class-token/input channel (and its QK/V/1/o aliases), 1xD.
    pub m_i: Tensor,
    /// Union gate over the MLP hidden channel, 1xH.
    pub m_2: Tensor,
    pub task_count: usize,
}

impl CumulativeMasks {
    pub fn empty(d: usize, hidden: usize) -> Self {
        CumulativeMasks { m_i: Tensor::zeros(1, d), m_2: Tensor::zeros(1, hidden), task_count: 0 }
    }
}

/// Scale schedule over one epoch: affine from 1/s_max at the first batch
/// to s_max at the last. A single-batch epoch jumps straight to s_max.
pub fn anneal_s(batch_index: usize, batches_per_epoch: usize, s_max: f64) -> f64 {
    debug_assert!(batch_index >= 1 && batch_index <= batches_per_epoch);
    if batches_per_epoch <= 1 {
        return s_max;
    }
    let frac = (batch_index - 1) as f64 / (batches_per_epoch - 1) as f64;
    1.0 / s_max + (s_max - 1.0 / s_max) * frac
}

/// Elementwise-max accumulation of the current task masks into the union.
/// `binarize` thresholds the incoming masks at 0.5 first.
pub fn accumulate(
    current_i: &Tensor,
    current_2: &Tensor,
    previous: &CumulativeMasks,
    binarize: bool,
) -> Result<CumulativeMasks> {
    let bin = |t: &Tensor| {
        if binarize {
            t.map(|x| if x >= 0.5 { 1.0 } else { 0.0 })
        } else {
            t.clone()
        }
    };
    let m_i = previous.m_i.zip(&bin(current_i), f64::max)?;
    let m_2 = previous.m_2.zip(&bin(current_2), f64::max)?;
    Ok(CumulativeMasks { m_i, m_2, task_count: previous.task_count + 1 })
}

/// Capacity-controlled sparsity loss on the current task masks, built on
/// the tape so it differentiates back into the mask embeddings. Returns
/// `None` when all capacity is already used (loss contribution 0).
pub fn sparsity_loss(
    tape: &mut Tape,
    m_i: Var,
    m_2: Var,
    cumulative: &CumulativeMasks,
    lambda: f64,
) -> Result<Option<Var>> {
    let free_i = cumulative.m_i.map(|x| 1.0 - x);
    let free_2 = cumulative.m_2.map(|x| 1.0 - x);
    let denom = free_i.sum() + free_2.sum();
    if denom <= 0.0 {
        log::warn!("sparsity_loss: mask capacity exhausted; loss forced to 0");
        return Ok(None);
    }
    let fi = tape.constant(free_i);
    let f2 = tape.constant(free_2);
    let wi = tape.mul(m_i, fi)?;
    let w2 = tape.mul(m_2, f2)?;
    let si = tape.sum(wi)?;
    let s2 = tape.sum(w2)?;
    let num = tape.add(si, s2)?;
    Ok(Some(tape.scale(num, lambda / denom)?))
}

/// Gradient-gate value 1 - min(m_in[k], m_out[l]) for each weight entry,
/// for a weight stored as (in x out).
fn weight_mask(m_in: &Tensor, m_out: &Tensor) -> Tensor {
    let (rows, cols) = (m_in.cols(), m_out.cols());
    let mut out = Tensor::zeros(rows, cols);
    for k in 0..rows {
        for l in 0..cols {
            out.set(k, l, 1.0 - m_in.data()[k].min(m_out.data()[l]));
        }
    }
    out
}

fn complement(m: &Tensor) -> Tensor {
    m.map(|x| 1.0 - x)
}

/// Gradient gates for every decoder weight reachable from past-task masks.
/// Keys are parameter names under the given prefix (usually "gcab").
/// Head gates are emitted for tasks `0..task_count` (completed tasks only);
/// the mask-embedding gates keep only the current task's column trainable.
pub fn build_weight_masks(
    cumulative: &CumulativeMasks,
    prefix: &str,
    head_class_counts: &[usize],
    current_task: usize,
    max_tasks: usize,
) -> BTreeMap<String, Tensor> {
    let ci = &cumulative.m_i; // aliases QK, V, 1, o
    let c2 = &cumulative.m_2;
    let mut gates = BTreeMap::new();
    let mut put = |name: &str, t: Tensor| {
        gates.insert(format!("{prefix}.{name}"), t);
    };

    put("wq", weight_mask(ci, ci));
    put("wk", weight_mask(ci, ci));
    put("wv", weight_mask(ci, ci));
    put("wo", weight_mask(ci, ci));
    put("w1", weight_mask(ci, c2));
    put("w2", weight_mask(c2, ci));
    // biases follow their layer's output channel
    put("bq", complement(ci));
    put("bk", complement(ci));
    put("bv", complement(ci));
    put("bo", complement(ci));
    put("b1", complement(c2));
    put("b2", complement(ci));
    put("theta", complement(ci));

    // per-task classifier heads: past heads gated by (1 - m_o^{<t}) on
    // their input rows, biases fully frozen; the current head is free
    for (t, &classes) in head_class_counts.iter().enumerate() {
        if t >= current_task {
            continue;
        }
        let mut wg = Tensor::zeros(ci.cols(), classes);
        for k in 0..ci.cols() {
            let g = 1.0 - ci.data()[k];
            for l in 0..classes {
                wg.set(k, l, g);
            }
        }
        put(&format!("head{t}.w"), wg);
        put(&format!("head{t}.b"), Tensor::zeros(1, classes));
    }

    // mask embeddings: only the current task's column learns
    let col_gate = |dim: usize| {
        let mut g = Tensor::zeros(dim, max_tasks);
        for k in 0..dim {
            g.set(k, current_task, 1.0);
        }
        g
    };
    put("mask_a_i", col_gate(ci.cols()));
    put("mask_a_2", col_gate(c2.cols()));

    gates
}

/// Mean used capacity per component plus the aggregate over all gated units.
pub fn capacity_usage(cumulative: &CumulativeMasks) -> Vec<(String, f64)> {
    let agg = (cumulative.m_i.sum() + cumulative.m_2.sum())
        / (cumulative.m_i.len() + cumulative.m_2.len()) as f64;
    vec![
        ("m_i".to_string(), cumulative.m_i.mean()),
        ("m_2".to_string(), cumulative.m_2.mean()),
        ("aggregate".to_string(), agg),
    ]
}

/// sigma(s * A * onehot(task)) as a 1xdim tape variable, differentiable in A.
pub fn compute_mask(tape: &mut Tape, embedding: Var, task: usize, s: f64) -> Result<Var> {
    let cols = tape.value(embedding).cols();
    if task >= cols {
        return Err(Error::State(format!(
            "task index {task} out of range for mask embedding with capacity {cols}"
        )));
    }
    if s <= 0.0 {
        return Err(Error::State(format!("mask scale s must be positive, got {s}")));
    }
    let col = tape.slice_cols(embedding, task, task + 1)?;
    let row = tape.transpose(col)?;
    let scaled = tape.scale(row, s)?;
    tape.sigmoid(scaled)
}
