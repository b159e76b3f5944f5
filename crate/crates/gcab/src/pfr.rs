//! Projected functional regularization and cascaded feature drift
//! compensation.
//!
//! Projector p^t (0-based task t >= 1) maps task-t backbone features toward
//! the task-(t-1) feature space, applied independently to each token. At
//! inference the stored projectors compose in reverse (p^t first, then
//! p^{t-1}, ... down to p^{s+1}) to align current features with an earlier
//! task's decoder.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, VarMap};
use crate::tensor::Tensor;
use crate::vit::init_uniform;

pub fn projector_prefix(task: usize) -> String {
    format!("proj{task}")
}

fn near_identity(rng: &mut impl Rng, d: usize, noise: f64) -> Tensor {
    let mut w = Tensor::eye(d);
    let jitter = init_uniform(rng, d, d, noise);
    for (x, j) in w.data_mut().iter_mut().zip(jitter.data()) {
        *x += j;
    }
    w
}

/// Insert projector parameters for task `task` (near-identity init).
pub fn init_projector(
    store: &mut BTreeMap<String, Tensor>,
    task: usize,
    d: usize,
    layers: usize,
    rng: &mut impl Rng,
) {
    let p = projector_prefix(task);
    store.insert(format!("{p}.l1.w"), near_identity(rng, d, 0.01));
    store.insert(format!("{p}.l1.b"), Tensor::zeros(1, d));
    if layers == 2 {
        store.insert(format!("{p}.l2.w"), near_identity(rng, d, 0.01));
        store.insert(format!("{p}.l2.b"), Tensor::zeros(1, d));
    }
}

/// Apply projector p^task to NxD features (per-token MLP).
pub fn projector_forward(
    tape: &mut Tape,
    vm: &VarMap,
    task: usize,
    x: Var,
    layers: usize,
) -> Result<Var> {
    let p = projector_prefix(task);
    let w1 = vm
        .get(&format!("{p}.l1.w"))
        .map_err(|_| Error::State(format!("missing projector p^{task} in the cascade")))?;
    let b1 = vm.get(&format!("{p}.l1.b"))?;
    let y = tape.matmul(x, w1)?;
    let y = tape.add_row(y, b1)?;
    if layers == 2 {
        let y = tape.silu(y)?;
        let w2 = vm.get(&format!("{p}.l2.w"))?;
        let b2 = vm.get(&format!("{p}.l2.b"))?;
        let y = tape.matmul(y, w2)?;
        return tape.add_row(y, b2);
    }
    Ok(y)
}

/// Compose the stored projectors to map current-task features back to the
/// target task's feature space: apply p^current first, then down to
/// p^{target+1}. `target == current` is the identity.
pub fn cascade_project(
    tape: &mut Tape,
    vm: &VarMap,
    features: Var,
    target: usize,
    current: usize,
    layers: usize,
) -> Result<Var> {
    if target > current {
        return Err(Error::State(format!(
            "cascade target task {target} is after current task {current}"
        )));
    }
    let mut x = features;
    for t in ((target + 1)..=current).rev() {
        x = projector_forward(tape, vm, t, x, layers)?;
    }
    Ok(x)
}

/// lambda * mean over tokens of the cosine distance (1 - cos) between
/// projected current features and frozen previous features.
pub fn cosine_distance_loss(
    tape: &mut Tape,
    projected: Var,
    target: Var,
    lambda: f64,
) -> Result<Var> {
    let sims = tape.cosine_rows(projected, target)?;
    let mean_sim = tape.mean(sims)?;
    let neg = tape.scale(mean_sim, -1.0)?;
    let dist = tape.add_scalar(neg, 1.0)?;
    tape.scale(dist, lambda)
}
