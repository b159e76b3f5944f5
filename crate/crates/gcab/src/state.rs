//! Mutable experiment state carried across tasks: the parameter store,
//! cumulative masks, frozen previous backbone, and the bookkeeping that
//! keeps task begin/finalize calls honest.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gcab::{add_head, init_gcab};
use crate::masks::{accumulate, CumulativeMasks};
use crate::pfr::init_projector;
use crate::tensor::{Precision, Tensor};
use crate::vit::{init_backbone, Arch};

pub const BB: &str = "bb";
pub const DEC: &str = "dec";

#[derive(Debug, Clone)]
pub struct CilState {
    pub arch: Arch,
    pub precision: Precision,
    pub params: BTreeMap<String, Tensor>,
    pub cum: CumulativeMasks,
    /// Class count per head, indexed by task; grows in begin_task.
    pub head_class_counts: Vec<usize>,
    /// Tasks whose masks have been accumulated.
    pub finalized_tasks: usize,
    /// Snapshot of backbone params at the end of the previous task
    /// (the frozen Psi^{t-1} that PFR regresses toward).
    pub prev_backbone: Option<BTreeMap<String, Tensor>>,
    /// 0 disables projectors (none/fd modes).
    pub pfr_layers: usize,
}

impl CilState {
    pub fn new(arch: Arch, precision: Precision, pfr_layers: usize, rng: &mut impl Rng) -> Self {
        let mut params = BTreeMap::new();
        init_backbone(&mut params, BB, &arch, rng);
        init_gcab(&mut params, DEC, &arch, rng);
        let cum = CumulativeMasks::empty(arch.embed_dim, arch.mlp_hidden());
        CilState {
            arch,
            precision,
            params,
            cum,
            head_class_counts: Vec::new(),
            finalized_tasks: 0,
            prev_backbone: None,
            pfr_layers,
        }
    }

    /// Index of the task currently being trained.
    pub fn current_task(&self) -> Result<usize> {
        if self.head_class_counts.len() == self.finalized_tasks {
            return Err(Error::State("no task in progress".into()));
        }
        Ok(self.head_class_counts.len() - 1)
    }

    pub fn classes_seen(&self) -> usize {
        self.head_class_counts.iter().sum()
    }

    /// Register task `t`: add its head, and (for t >= 1, when projectors
    /// are enabled) its drift projector. The previous task must have been
    /// finalized first.
    pub fn begin_task(&mut self, classes: usize, rng: &mut impl Rng) -> Result<usize> {
        if self.head_class_counts.len() != self.finalized_tasks {
            return Err(Error::State(format!(
                "task {} not finalized before beginning the next",
                self.head_class_counts.len() - 1
            )));
        }
        let t = self.head_class_counts.len();
        if t >= self.arch.max_tasks {
            return Err(Error::State(format!(
                "task {t} exceeds mask capacity for {} tasks",
                self.arch.max_tasks
            )));
        }
        add_head(&mut self.params, DEC, t, classes, rng);
        if t >= 1 && self.pfr_layers > 0 {
            init_projector(&mut self.params, t, self.arch.embed_dim, self.pfr_layers, rng);
        }
        self.head_class_counts.push(classes);
        Ok(t)
    }

    /// sigma(s * column) of a mask embedding, tape-free.
    fn mask_column(&self, name: &str, task: usize, s: f64) -> Tensor {
        let emb = &self.params[name];
        let mut out = Tensor::zeros(1, emb.rows());
        for r in 0..emb.rows() {
            out.set(0, r, 1.0 / (1.0 + (-s * emb.get(r, task)).exp()));
        }
        out.quantize(self.precision);
        out
    }

    pub fn mask_values(&self, task: usize, s: f64) -> (Tensor, Tensor) {
        (
            self.mask_column(&format!("{DEC}.mask_a_i"), task, s),
            self.mask_column(&format!("{DEC}.mask_a_2"), task, s),
        )
    }

    /// Accumulate the finished task's masks (evaluated at s_max) into the
    /// cumulative union and snapshot the backbone for the next task's PFR
    /// target. Calling twice for the same task is an error.
    pub fn finalize_task(&mut self, s_max: f64, binarize: bool) -> Result<()> {
        let t = self.current_task().map_err(|_| {
            Error::State(format!(
                "finalize_task called twice for task {}",
                self.finalized_tasks.saturating_sub(1)
            ))
        })?;
        let (m_i, m_2) = self.mask_values(t, s_max);
        self.cum = accumulate(&m_i, &m_2, &self.cum, binarize)?;
        if binarize {
            // Snap the finished task's embedding column so its masks are
            // exactly 0/1 at every later evaluation (sigma(+-s_max) is
            // exactly 1.0 / 0.0 in f64 for s_max > ~745).
            for (name, mask) in [
                (format!("{DEC}.mask_a_i"), &m_i),
                (format!("{DEC}.mask_a_2"), &m_2),
            ] {
                let emb = self.params.get_mut(&name).expect("mask embedding");
                for r in 0..emb.rows() {
                    emb.set(r, t, if mask.get(0, r) >= 0.5 { 1.0 } else { -1.0 });
                }
            }
        }
        self.prev_backbone = Some(self.backbone_snapshot());
        self.finalized_tasks += 1;
        Ok(())
    }

    pub fn backbone_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{BB}.")))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Which parameters receive gradients while training `task`.
    /// Fine-grained freezing inside trainable tensors is handled by the
    /// optimizer gates, not here.
    pub fn trainable(&self, name: &str, task: usize, freeze_backbone: bool, gca: bool) -> bool {
        if name.starts_with(&format!("{BB}.")) {
            return !(freeze_backbone && task > 0);
        }
        if name.starts_with(&format!("{DEC}.mask_a")) {
            return gca;
        }
        if let Some(rest) = name.strip_prefix("proj") {
            // only the current task's projector trains (from L_pfr alone)
            let id: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            return id == task;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Arch {
        Arch {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2.0,
            classifier_layernorm: true,
            max_tasks: 3,
        }
    }

    #[test]
    fn begin_finalize_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = CilState::new(tiny_arch(), Precision::F64, 2, &mut rng);
        assert!(st.current_task().is_err());
        assert_eq!(st.begin_task(2, &mut rng).unwrap(), 0);
        assert_eq!(st.current_task().unwrap(), 0);
        assert!(!st.params.contains_key("proj0.l1.w"));
        st.finalize_task(800.0, false).unwrap();
        assert_eq!(st.cum.task_count, 1);
        assert!(st.prev_backbone.is_some());
        assert_eq!(st.begin_task(2, &mut rng).unwrap(), 1);
        assert!(st.params.contains_key("proj1.l1.w"));
        assert!(st.params.contains_key("proj1.l2.w"));
    }

    #[test]
    fn double_finalize_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = CilState::new(tiny_arch(), Precision::F64, 0, &mut rng);
        st.begin_task(2, &mut rng).unwrap();
        st.finalize_task(800.0, false).unwrap();
        assert!(st.finalize_task(800.0, false).is_err());
    }

    #[test]
    fn begin_without_finalize_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = CilState::new(tiny_arch(), Precision::F64, 0, &mut rng);
        st.begin_task(2, &mut rng).unwrap();
        assert!(st.begin_task(2, &mut rng).is_err());
    }

    #[test]
    fn capacity_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = CilState::new(tiny_arch(), Precision::F64, 0, &mut rng);
        for _ in 0..3 {
            st.begin_task(2, &mut rng).unwrap();
            st.finalize_task(800.0, false).unwrap();
        }
        assert!(st.begin_task(2, &mut rng).is_err());
    }

    #[test]
    fn trainable_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = CilState::new(tiny_arch(), Precision::F64, 2, &mut rng);
        assert!(st.trainable("bb.blk0.wq", 0, true, true));
        assert!(!st.trainable("bb.blk0.wq", 1, true, true));
        assert!(st.trainable("bb.blk0.wq", 1, false, true));
        assert!(!st.trainable("dec.mask_a_i", 1, false, false));
        assert!(st.trainable("proj2.l1.w", 2, false, true));
        assert!(!st.trainable("proj1.l1.w", 2, false, true));
        assert!(st.trainable("dec.head0.w", 2, false, true));
    }

    #[test]
    fn mask_values_saturate_at_s_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = CilState::new(tiny_arch(), Precision::F64, 0, &mut rng);
        // plant a clearly positive and clearly negative entry
        let emb = st.params.get_mut("dec.mask_a_i").unwrap();
        emb.set(0, 0, 0.09);
        emb.set(1, 0, -0.09);
        let (m_i, _) = st.mask_values(0, 800.0);
        assert_eq!(m_i.get(0, 0), 1.0);
        assert!(m_i.get(0, 1) < 1e-30);
    }
}
