//! Class-incremental protocol: task splits, the per-task training loop
//! assembling L = L_cls + L_pfr + L_GCAB, evaluation over all seen
//! classes, and metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    BackboneReg, DataSource, ExperimentConfig, LossKind, SplitConfig, SplitScheme,
};
use crate::data::{load_idx, load_manifest_dir, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gcab::{cab_forward, classify, multi_pass_logits, ones_masks, task_masks};
use crate::masks::{anneal_s, build_weight_masks, capacity_usage, sparsity_loss};
use crate::optim::Adam;
use crate::par::map_batch;
use crate::pfr::{cascade_project, cosine_distance_loss, projector_forward};
use crate::state::{CilState, BB, DEC};
use crate::tape::{Tape, Var, VarMap};
use crate::tensor::Tensor;
use crate::vit::{backbone_forward, patchify, Arch};

/// One task's data; labels are global class ids after the seeded reorder.
#[derive(Debug, Clone)]
pub struct Task {
    pub class_lo: usize,
    pub class_hi: usize,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

impl Task {
    pub fn classes(&self) -> usize {
        self.class_hi - self.class_lo
    }
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    /// class_order[global_id] = original dataset class id.
    pub class_order: Vec<usize>,
    pub num_classes: usize,
}

fn task_sizes(num_classes: usize, split: &SplitConfig) -> Result<Vec<usize>> {
    match split.scheme {
        SplitScheme::Equal => {
            if split.tasks == 0 || num_classes % split.tasks != 0 {
                return Err(Error::Config(format!(
                    "{num_classes} classes not divisible into {} equal tasks",
                    split.tasks
                )));
            }
            Ok(vec![num_classes / split.tasks; split.tasks])
        }
        SplitScheme::LargerFirst => {
            let first = split
                .first
                .ok_or_else(|| Error::Config("larger_first requires split.first".into()))?;
            if first == 0 || first >= num_classes || (num_classes - first) % split.tasks != 0 {
                return Err(Error::Config(format!(
                    "larger_first({first}) incompatible with {num_classes} classes / {} rest tasks",
                    split.tasks
                )));
            }
            let mut sizes = vec![first];
            sizes.extend(vec![(num_classes - first) / split.tasks; split.tasks]);
            Ok(sizes)
        }
    }
}

/// Deterministic class-to-task assignment: seeded shuffle of class ids,
/// then contiguous slicing. Labels are remapped to positions in the
/// shuffled order so each task owns a contiguous id range.
pub fn split_tasks(
    train: &Dataset,
    test: &Dataset,
    split: &SplitConfig,
    seed: u64,
) -> Result<TaskSequence> {
    let c = train.num_classes;
    let sizes = task_sizes(c, split)?;
    let mut class_order: Vec<usize> = (0..c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0517);
    class_order.shuffle(&mut rng);
    let mut remap = vec![0usize; c];
    for (global, &orig) in class_order.iter().enumerate() {
        remap[orig] = global;
    }
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut lo = 0;
    for &sz in &sizes {
        let hi = lo + sz;
        let collect = |ds: &Dataset| {
            ds.images
                .iter()
                .zip(&ds.labels)
                .filter(|(_, &l)| (lo..hi).contains(&remap[l]))
                .map(|(img, &l)| (img.clone(), remap[l]))
                .collect::<Vec<_>>()
        };
        let task = Task {
            class_lo: lo,
            class_hi: hi,
            train: collect(train),
            test: collect(test),
        };
        if task.train.is_empty() || task.test.is_empty() {
            return Err(Error::Data(format!(
                "task over classes {lo}..{hi} has an empty split"
            )));
        }
        tasks.push(task);
        lo = hi;
    }
    Ok(TaskSequence {
        tasks,
        class_order,
        num_classes: c,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub gca: bool,
    pub backbone_reg: BackboneReg,
    pub fdc: bool,
    pub freeze_backbone: bool,
    pub binarize: bool,
    pub lambda_pfr: f64,
    pub lambda_gcab: f64,
    pub s_max: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossKind,
}

impl TrainOpts {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        TrainOpts {
            gca: cfg.ablation.gca,
            backbone_reg: cfg.ablation.backbone_reg,
            fdc: cfg.ablation.fdc,
            freeze_backbone: cfg.ablation.freeze_backbone_after_task1,
            binarize: cfg.ablation.binarize_at_accumulate,
            lambda_pfr: cfg.train.lambda_pfr,
            lambda_gcab: cfg.train.lambda_gcab,
            s_max: cfg.train.s_max,
            epochs: cfg.train.epochs,
            lr: cfg.train.lr,
            batch_size: cfg.train.batch_size,
            loss: cfg.train.loss,
        }
    }
}

fn one_hot(width: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(1, width);
    t.set(0, class, 1.0);
    t
}

/// All decoder passes 0..=upto on (optionally per-pass compensated)
/// backbone features, concatenated into one logit row. `s_current` applies
/// to pass `upto`; earlier passes always use s_max.
fn seen_logits(
    tape: &mut Tape,
    vm: &VarMap,
    state: &CilState,
    opts: &TrainOpts,
    feats: Var,
    upto: usize,
    s_current: f64,
    compensate: bool,
) -> Result<Var> {
    let arch = &state.arch;
    let mut per_pass = Vec::with_capacity(upto + 1);
    for t in 0..=upto {
        let f = if compensate && t < upto && state.pfr_layers > 0 {
            cascade_project(tape, vm, feats, t, upto, state.pfr_layers)?
        } else {
            feats
        };
        per_pass.push(f);
    }
    if opts.gca {
        let mut scales = vec![opts.s_max; upto + 1];
        scales[upto] = s_current;
        multi_pass_logits(tape, vm, DEC, &per_pass, &scales, arch)
    } else {
        let mut parts = Vec::with_capacity(upto + 1);
        for (t, &f) in per_pass.iter().enumerate() {
            let out = cab_forward(tape, vm, DEC, f, arch)?;
            let ones = ones_masks(tape, arch);
            parts.push(classify(tape, vm, DEC, out, ones.m_i, t, arch)?);
        }
        tape.concat_cols(&parts)
    }
}

/// Per-image training loss (Eq. 8) and its parameter gradients.
fn image_loss(
    state: &CilState,
    opts: &TrainOpts,
    image: &[f64],
    label: usize,
    task: usize,
    s: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let arch = &state.arch;
    let mut tape = Tape::new(state.precision);
    let vm = VarMap::bind(&mut tape, state.params.iter(), |n| {
        state.trainable(n, task, opts.freeze_backbone, opts.gca)
    });
    let patches = tape.constant(patchify(image, arch)?);
    let feats = backbone_forward(&mut tape, &vm, BB, patches, arch)?;
    // old passes see raw current features during training; compensation is
    // an inference-time mechanism
    let logits = seen_logits(&mut tape, &vm, state, opts, feats, task, s, false)?;
    let width = tape.value(logits).cols();
    let targets = one_hot(width, label);
    let mut total = match opts.loss {
        LossKind::Bce => tape.bce_with_logits(logits, targets)?,
        LossKind::SoftmaxCe => tape.softmax_xent(logits, targets)?,
    };
    if opts.gca && opts.lambda_gcab > 0.0 {
        let masks = task_masks(&mut tape, &vm, DEC, task, s)?;
        if let Some(l_gcab) =
            sparsity_loss(&mut tape, masks.m_i, masks.m_2, &state.cum, opts.lambda_gcab)?
        {
            total = tape.add(total, l_gcab)?;
        }
    }
    if task >= 1 && opts.backbone_reg != BackboneReg::None && opts.lambda_pfr > 0.0 {
        let prev = state
            .prev_backbone
            .as_ref()
            .ok_or_else(|| Error::State("no frozen backbone snapshot for PFR".into()))?;
        let vm_prev = VarMap::bind(&mut tape, prev.iter(), |_| false);
        let target_feats = backbone_forward(&mut tape, &vm_prev, BB, patches, arch)?;
        let projected = match opts.backbone_reg {
            BackboneReg::Fd => feats,
            _ => projector_forward(&mut tape, &vm, task, feats, state.pfr_layers)?,
        };
        let l_pfr = cosine_distance_loss(&mut tape, projected, target_feats, opts.lambda_pfr)?;
        total = tape.add(total, l_pfr)?;
    }
    tape.backward(total)?;
    Ok((tape.value(total).item(), vm.gradients(&tape)))
}

fn accumulate_grads(
    acc: &mut BTreeMap<String, Tensor>,
    part: &BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, g) in part {
        match acc.get_mut(name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

/// Train one task end to end: registers the head (and projector), runs the
/// gated loop, and finalizes masks. `state` must have its previous task
/// finalized.
pub fn train_task(
    state: &mut CilState,
    task_data: &Task,
    opts: &TrainOpts,
    rng: &mut impl Rng,
) -> Result<()> {
    let t = state.begin_task(task_data.classes(), rng)?;
    let gates = build_weight_masks(
        &state.cum,
        DEC,
        &state.head_class_counts,
        t,
        state.arch.max_tasks,
    );
    let mut opt = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..task_data.train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let batches: Vec<&[usize]> = order.chunks(opts.batch_size).collect();
        let nb = batches.len();
        for (bi, batch) in batches.iter().enumerate() {
            let s = if opts.gca {
                anneal_s(bi + 1, nb, opts.s_max)
            } else {
                opts.s_max
            };
            let results = map_batch(batch, |&idx| {
                let (img, label) = &task_data.train[idx];
                image_loss(state, opts, img, *label, t, s)
            });
            let mut grads = BTreeMap::new();
            let mut loss_sum = 0.0;
            for (k, r) in results.into_iter().enumerate() {
                let (loss, g) = r.map_err(|e| {
                    Error::Autodiff(format!(
                        "task {t} epoch {epoch} batch {bi} sample {} (train idx {}): {e}",
                        k, batch[k]
                    ))
                })?;
                loss_sum += loss;
                accumulate_grads(&mut grads, &g)?;
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("task {t} epoch {epoch} batch {bi} loss"),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            opt.step(&mut state.params, &grads, &gates, state.precision)?;
        }
        log::debug!("task {t} epoch {epoch} done");
    }
    state.finalize_task(opts.s_max, opts.binarize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub data_task: usize,
    pub true_class: usize,
    pub pred_class: usize,
    /// Predicted class under task-aware evaluation (argmax within the
    /// true task's logit slice).
    pub pred_taw: usize,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    /// Task-agnostic accuracy (percent) per data task.
    pub tag: Vec<f64>,
    /// Task-aware accuracy (percent) per data task.
    pub taw: Vec<f64>,
    pub counts: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

pub fn class_offsets(head_class_counts: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(head_class_counts.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for &c in head_class_counts {
        acc += c;
        offs.push(acc);
    }
    offs
}

pub fn predict_image(
    state: &CilState,
    opts: &TrainOpts,
    image: &[f64],
    upto: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(state.precision);
    let vm = VarMap::bind(&mut tape, state.params.iter(), |_| false);
    let patches = tape.constant(patchify(image, &state.arch)?);
    let feats = backbone_forward(&mut tape, &vm, BB, patches, &state.arch)?;
    let logits = seen_logits(
        &mut tape, &vm, state, opts, feats, upto, opts.s_max, opts.fdc,
    )?;
    Ok(tape.value(logits).data().to_vec())
}

/// Evaluate the model after task `upto` on the test sets of every task
/// seen so far (s = s_max; drift compensation per pass when enabled).
pub fn evaluate(state: &CilState, tasks: &[Task], upto: usize, opts: &TrainOpts) -> Result<EvalRow> {
    if upto + 1 > state.finalized_tasks {
        return Err(Error::State(format!(
            "evaluate after task {upto} but only {} tasks finalized",
            state.finalized_tasks
        )));
    }
    let offs = class_offsets(&state.head_class_counts[..=upto]);
    let mut row = EvalRow {
        tag: Vec::new(),
        taw: Vec::new(),
        counts: Vec::new(),
        predictions: Vec::new(),
    };
    for (dt, task) in tasks.iter().take(upto + 1).enumerate() {
        let results = map_batch(&task.test, |(img, label)| {
            predict_image(state, opts, img, upto).map(|l| (l, *label))
        });
        let (mut tag_hits, mut taw_hits) = (0usize, 0usize);
        for r in results {
            let (logits, label) = r?;
            let argmax = |xs: &[f64]| {
                xs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("nonempty logits")
            };
            let pred = argmax(&logits);
            let slice = &logits[offs[dt]..offs[dt + 1]];
            let pred_taw = offs[dt] + argmax(slice);
            if pred == label {
                tag_hits += 1;
            }
            if pred_taw == label {
                taw_hits += 1;
            }
            row.predictions.push(Prediction {
                data_task: dt,
                true_class: label,
                pred_class: pred,
                pred_taw,
            });
        }
        let n = task.test.len();
        row.tag.push(100.0 * tag_hits as f64 / n as f64);
        row.taw.push(100.0 * taw_hits as f64 / n as f64);
        row.counts.push(n);
    }
    Ok(row)
}

/// Lower-triangular accuracy matrix: row t holds per-task accuracies of
/// the model after training task t.
#[derive(Debug, Clone, Default)]
pub struct AccuracyMatrix {
    pub tag: Vec<Vec<f64>>,
    pub taw: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn push_row(&mut self, row: &EvalRow) -> Result<()> {
        let stage = self.tag.len();
        if row.tag.len() != stage + 1 {
            return Err(Error::State(format!(
                "row {stage} has {} entries, expected {}",
                row.tag.len(),
                stage + 1
            )));
        }
        self.tag.push(row.tag.clone());
        self.taw.push(row.taw.clone());
        if row.counts.len() > self.counts.len() {
            self.counts = row.counts.clone();
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.tag.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Final-stage task-agnostic accuracy over all classes.
    pub acc_tag: f64,
    /// Mean of final-stage task-aware accuracies over tasks.
    pub acc_taw: f64,
    /// Mean over stages of the task-agnostic accuracy over classes seen
    /// at that stage.
    pub acc_avg: f64,
    /// Per stage: task-agnostic accuracy over everything seen so far.
    pub cumulative_acc: Vec<f64>,
    /// Per stage: best earlier cumulative accuracy minus the current one
    /// (0 at stage 0, never negative).
    pub cumulative_forgetting: Vec<f64>,
}

pub fn metrics(matrix: &AccuracyMatrix) -> Result<Metrics> {
    let t = matrix.stages();
    if t == 0 || matrix.counts.len() != t {
        return Err(Error::State("incomplete accuracy matrix".into()));
    }
    for (i, row) in matrix.tag.iter().enumerate() {
        if row.len() != i + 1 || matrix.taw[i].len() != i + 1 {
            return Err(Error::State(format!("accuracy matrix row {i} incomplete")));
        }
    }
    let stage_tag = |row: &[f64]| {
        let n: usize = matrix.counts[..row.len()].iter().sum();
        let hits: f64 = row
            .iter()
            .zip(&matrix.counts)
            .map(|(a, &c)| a * c as f64)
            .sum();
        hits / n as f64
    };
    let cumulative_acc: Vec<f64> = matrix.tag.iter().map(|r| stage_tag(r)).collect();
    let mut best = f64::NEG_INFINITY;
    let cumulative_forgetting = cumulative_acc
        .iter()
        .map(|&a| {
            best = best.max(a);
            best - a
        })
        .collect();
    let final_taw = &matrix.taw[t - 1];
    Ok(Metrics {
        acc_tag: cumulative_acc[t - 1],
        acc_taw: final_taw.iter().sum::<f64>() / final_taw.len() as f64,
        acc_avg: cumulative_acc.iter().sum::<f64>() / t as f64,
        cumulative_acc,
        cumulative_forgetting,
    })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: CilState,
    pub sequence: TaskSequence,
    pub matrix: AccuracyMatrix,
    pub metrics: Metrics,
    /// capacity_usage snapshots, one per finalized task.
    pub capacity: Vec<Vec<(String, f64)>>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synth => synth_dataset(&cfg.data.synth_spec(), cfg.seed),
        DataSource::Idx => {
            let ds = load_idx(
                cfg.data.images.as_ref().expect("validated"),
                cfg.data.labels.as_ref().expect("validated"),
                cfg.data.num_classes,
            )?;
            Ok(holdout_split(&ds))
        }
        DataSource::Manifest => {
            let ds = load_manifest_dir(cfg.data.dir.as_ref().expect("validated"))?;
            Ok(holdout_split(&ds))
        }
    }
}

/// Deterministic 80/20 split for sources without a native test set:
/// within each class, every 5th sample goes to test.
fn holdout_split(ds: &Dataset) -> (Dataset, Dataset) {
    let blank = |d: &Dataset| Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        ..d.clone()
    };
    let (mut train, mut test) = (blank(ds), blank(ds));
    let mut per_class = vec![0usize; ds.num_classes];
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        let dst = if per_class[l] % 5 == 0 { &mut test } else { &mut train };
        dst.images.push(img.clone());
        dst.labels.push(l);
        per_class[l] += 1;
    }
    (train, test)
}

pub fn build_arch(cfg: &ExperimentConfig, train: &Dataset) -> Result<Arch> {
    let arch = Arch {
        image_h: train.image_h,
        image_w: train.image_w,
        channels: train.channels,
        patch: cfg.arch.patch,
        embed_dim: cfg.arch.embed_dim,
        heads: cfg.arch.heads,
        blocks: cfg.arch.blocks,
        mlp_ratio: cfg.arch.mlp_ratio,
        classifier_layernorm: cfg.arch.classifier_layernorm,
        max_tasks: cfg.num_tasks(),
    };
    arch.validate()?;
    Ok(arch)
}

/// Full class-incremental run: split, train every task, evaluate after
/// each, and compute summary metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_with(cfg, |_, _, _| Ok(()))
}

/// Like [`run_experiment`], invoking `on_task(task, state, rng)` after each
/// task is trained and evaluated (e.g. to write per-task checkpoints).
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_task: impl FnMut(usize, &CilState, &ChaCha8Rng) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let sequence = split_tasks(&train, &test, &cfg.split, cfg.seed)?;
    let arch = build_arch(cfg, &train)?;
    let opts = TrainOpts::from_config(cfg);
    let pfr_layers = cfg.ablation.backbone_reg.projector_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = CilState::new(arch, cfg.precision.as_precision(), pfr_layers, &mut rng);
    let mut matrix = AccuracyMatrix::default();
    let mut capacity = Vec::new();
    for (t, task) in sequence.tasks.iter().enumerate() {
        train_task(&mut state, task, &opts, &mut rng)?;
        capacity.push(capacity_usage(&state.cum));
        let row = evaluate(&state, &sequence.tasks, t, &opts)?;
        log::info!(
            "task {t}: stage TAG {:?}",
            row.tag.iter().map(|x| (x * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
        matrix.push_row(&row)?;
        on_task(t, &state, &rng)?;
    }
    let metrics = metrics(&matrix)?;
    Ok(RunOutcome {
        state,
        sequence,
        matrix,
        metrics,
        capacity,
    })
}

/// Metrics CSV: a comment line with provenance, per-stage rows, then a
/// summary block.
pub fn write_metrics_csv(
    path: &Path,
    cfg_hash: &str,
    seed: u64,
    matrix: &AccuracyMatrix,
    m: &Metrics,
    capacity: &[Vec<(String, f64)>],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# config_hash={cfg_hash} seed={seed}")?;
    writeln!(w, "stage,task,tag_acc,taw_acc")?;
    for (stage, (tag, taw)) in matrix.tag.iter().zip(&matrix.taw).enumerate() {
        for (task, (a, b)) in tag.iter().zip(taw).enumerate() {
            writeln!(w, "{stage},{task},{a:.6},{b:.6}")?;
        }
    }
    writeln!(w, "summary,ACC_TAG,{:.6}", m.acc_tag)?;
    writeln!(w, "summary,ACC_TAW,{:.6}", m.acc_taw)?;
    writeln!(w, "summary,ACC_AVG,{:.6}", m.acc_avg)?;
    for (t, (a, f)) in m
        .cumulative_acc
        .iter()
        .zip(&m.cumulative_forgetting)
        .enumerate()
    {
        writeln!(w, "summary,cumulative_acc_{t},{a:.6}")?;
        writeln!(w, "summary,cumulative_forgetting_{t},{f:.6}")?;
    }
    for (t, caps) in capacity.iter().enumerate() {
        for (name, v) in caps {
            writeln!(w, "summary,capacity_{name}_{t},{v:.6}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Backbone features of `samples`, compensated into task `target`'s
/// feature space when drift compensation is on (embedding-dump workflow).
pub fn export_embeddings(
    state: &CilState,
    opts: &TrainOpts,
    samples: &[(Vec<f64>, usize)],
    target: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if state.finalized_tasks == 0 {
        return Err(Error::State("no trained tasks to export from".into()));
    }
    let current = state.finalized_tasks - 1;
    if target > current {
        return Err(Error::State(format!(
            "target task {target} not trained yet (current {current})"
        )));
    }
    let rows = map_batch(samples, |(img, label)| -> Result<(usize, Vec<f64>)> {
        let mut tape = Tape::new(state.precision);
        let vm = VarMap::bind(&mut tape, state.params.iter(), |_| false);
        let patches = tape.constant(patchify(img, &state.arch)?);
        let feats = backbone_forward(&mut tape, &vm, BB, patches, &state.arch)?;
        let out = if opts.fdc && state.pfr_layers > 0 {
            cascade_project(&mut tape, &vm, feats, target, current, state.pfr_layers)?
        } else {
            feats
        };
        Ok((*label, tape.value(out).data().to_vec()))
    });
    rows.into_iter().collect()
}
