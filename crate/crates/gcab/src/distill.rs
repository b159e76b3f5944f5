//! GCAB distillation: compress the task-conditioned teacher (multi-pass
//! decoder + projector cascades + per-task heads) into one class-attention
//! block with an aggregated classifier, trained by KL matching on the
//! final task's data only. Optional static binary masks reserve capacity
//! for further continual training.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_map, read_tensor, write_map, write_tensor};
use crate::error::{Error, Result};
use crate::gcab::{gcab_forward, MaskVars};
use crate::harness::{predict_image, TrainOpts};
use crate::optim::Adam;
use crate::par::map_batch;
use crate::state::{CilState, BB, DEC};
use crate::tape::{Tape, Var, VarMap};
use crate::tensor::{Precision, Tensor};
use crate::vit::{backbone_forward, patchify, Arch};

pub const STU: &str = "stu";

#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Fraction of units active in the static masks; 1.0 = all-ones.
    pub capacity: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(capacity: f64) -> Self {
        DistillConfig {
            capacity,
            temperature: 1.0,
            epochs: 200,
            lr: 5e-3,
            batch_size: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0 && self.capacity <= 1.0) {
            return Err(Error::Config(format!(
                "capacity must be in (0, 1], got {}",
                self.capacity
            )));
        }
        if self.temperature <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "temperature, epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Single unmasked-at-inference class-attention student; the optional
/// static masks are fixed binary vectors sampled before training.
#[derive(Debug, Clone)]
pub struct StudentCab {
    pub arch: Arch,
    pub precision: Precision,
    /// `stu.*` decoder weights plus `stu.head.{w,b}` aggregated head.
    pub params: BTreeMap<String, Tensor>,
    pub mask_i: Tensor,
    pub mask_2: Tensor,
}

impl StudentCab {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Fixed binary row with round(kappa * dim) ones, uniformly placed.
pub fn sample_static_mask(kappa: f64, dim: usize, rng: &mut impl Rng) -> Tensor {
    let k = ((kappa * dim as f64).round() as usize).min(dim);
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.shuffle(rng);
    let mut m = Tensor::zeros(1, dim);
    for &i in idx.iter().take(k) {
        m.set(0, i, 1.0);
    }
    m
}

fn init_student(teacher: &CilState) -> BTreeMap<String, Tensor> {
    let mut params = BTreeMap::new();
    for name in ["theta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2"] {
        params.insert(
            format!("{STU}.{name}"),
            teacher.params[&format!("{DEC}.{name}")].clone(),
        );
    }
    // aggregated head: teacher heads concatenated over tasks
    let d = teacher.arch.embed_dim;
    let total: usize = teacher.head_class_counts.iter().sum();
    let mut w = Tensor::zeros(d, total);
    let mut b = Tensor::zeros(1, total);
    let mut off = 0;
    for (t, &c) in teacher.head_class_counts.iter().enumerate() {
        let hw = &teacher.params[&format!("{DEC}.head{t}.w")];
        let hb = &teacher.params[&format!("{DEC}.head{t}.b")];
        for r in 0..d {
            for j in 0..c {
                w.set(r, off + j, hw.get(r, j));
            }
        }
        for j in 0..c {
            b.set(0, off + j, hb.get(0, j));
        }
        off += c;
    }
    params.insert(format!("{STU}.head.w"), w);
    params.insert(format!("{STU}.head.b"), b);
    params
}

/// One student forward pass on backbone features: gated CAB with the
/// static masks, then the aggregated head.
pub fn student_logits(
    tape: &mut Tape,
    vm: &VarMap,
    student: &StudentCab,
    feats: Var,
) -> Result<Var> {
    let masks = MaskVars {
        m_i: tape.constant(student.mask_i.clone()),
        m_2: tape.constant(student.mask_2.clone()),
    };
    let f = gcab_forward(tape, vm, STU, feats, &masks, &student.arch)?;
    let f = if student.arch.classifier_layernorm {
        tape.layer_norm_rows(f)?
    } else {
        f
    };
    let fm = tape.mul_row(f, masks.m_i)?;
    let y = tape.matmul(fm, vm.get(&format!("{STU}.head.w"))?)?;
    tape.add_row(y, vm.get(&format!("{STU}.head.b"))?)
}

/// Student inference: backbone (from the teacher) + one student pass.
pub fn student_predict(
    teacher: &CilState,
    student: &StudentCab,
    image: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(student.precision);
    let vm_bb = VarMap::bind(&mut tape, teacher.params.iter(), |_| false);
    let patches = tape.constant(patchify(image, &teacher.arch)?);
    let feats = backbone_forward(&mut tape, &vm_bb, BB, patches, &teacher.arch)?;
    let vm = VarMap::bind(&mut tape, student.params.iter(), |_| false);
    let logits = student_logits(&mut tape, &vm, student, feats)?;
    Ok(tape.value(logits).data().to_vec())
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub kl: f64,
    pub accuracy: f64,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .map(|(i, _)| i)
        .expect("nonempty")
}

/// Distill the frozen teacher into a StudentCab using task-t data only.
/// Returns the student and per-epoch (mean KL, student accuracy).
pub fn distill(
    teacher: &CilState,
    opts: &TrainOpts,
    data: &[(Vec<f64>, usize)],
    cfg: &DistillConfig,
) -> Result<(StudentCab, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("distillation data is empty".into()));
    }
    if teacher.finalized_tasks == 0 {
        return Err(Error::State("teacher has no finalized tasks".into()));
    }
    let upto = teacher.finalized_tasks - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = teacher.arch.embed_dim;
    let h = teacher.arch.mlp_hidden();
    let mut student = StudentCab {
        arch: teacher.arch.clone(),
        precision: teacher.precision,
        params: init_student(teacher),
        mask_i: sample_static_mask(cfg.capacity, d, &mut rng),
        mask_2: sample_static_mask(cfg.capacity, h, &mut rng),
    };
    // backbone and teacher are frozen: precompute per-sample features and
    // tempered teacher targets once
    let prepped: Vec<(Tensor, Tensor, usize)> = map_batch(data, |(img, label)| {
        let mut tape = Tape::new(teacher.precision);
        let vm = VarMap::bind(&mut tape, teacher.params.iter(), |_| false);
        let patches = tape.constant(patchify(img, &teacher.arch)?);
        let feats = backbone_forward(&mut tape, &vm, BB, patches, &teacher.arch)?;
        let feats_t = tape.value(feats).clone();
        let logits = predict_image(teacher, opts, img, upto)?;
        let tempered: Vec<f64> = logits.iter().map(|&x| x / cfg.temperature).collect();
        let probs = Tensor::row(softmax(&tempered));
        Ok::<_, Error>((feats_t, probs, *label))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..prepped.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut kl_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_batch(batch, |&i| {
                let (feats, probs, _) = &prepped[i];
                let mut tape = Tape::new(student.precision);
                let vm = VarMap::bind(&mut tape, student.params.iter(), |_| true);
                let f = tape.constant(feats.clone());
                let logits = student_logits(&mut tape, &vm, &student, f)?;
                let scaled = tape.scale(logits, 1.0 / cfg.temperature)?;
                let kl = tape.kl_from_logits(scaled, probs.clone())?;
                tape.backward(kl)?;
                Ok::<_, Error>((tape.value(kl).item(), vm.gradients(&tape)))
            });
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in results {
                let (kl, g) = r?;
                kl_sum += kl;
                for (name, part) in g {
                    match grads.get_mut(&name) {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(part.data()) {
                                *x += y;
                            }
                        }
                        None => {
                            grads.insert(name, part);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            opt.step(&mut student.params, &grads, &BTreeMap::new(), student.precision)?;
        }
        let hits = prepped
            .iter()
            .filter(|(feats, _, label)| {
                let mut tape = Tape::new(student.precision);
                let vm = VarMap::bind(&mut tape, student.params.iter(), |_| false);
                let f = tape.constant(feats.clone());
                match student_logits(&mut tape, &vm, &student, f) {
                    Ok(l) => argmax(tape.value(l).data()) == *label,
                    Err(_) => false,
                }
            })
            .count();
        history.push(EpochStats {
            kl: kl_sum / prepped.len() as f64,
            accuracy: 100.0 * hits as f64 / prepped.len() as f64,
        });
    }
    Ok((student, history))
}

/// Multiply count of one class-attention decoder pass plus classifier.
/// `masked` adds the elementwise gate multiplications at the six GCAB
/// gate sites; the plain ViT decoder is the `masked = false` count.
pub fn cab_op_count(arch: &Arch, classes: usize, masked: bool) -> u64 {
    let d = arch.embed_dim as u64;
    let h = arch.mlp_hidden() as u64;
    let n1 = arch.num_patches() as u64 + 1; // p = [theta; b]
    let mut ops = 0u64;
    ops += d * d; // Q projection (1 x D row)
    ops += 2 * n1 * d * d; // K, V projections
    ops += 2 * n1 * d; // QK^T and A*V across heads
    ops += d * d; // output projection
    ops += 2 * d * h; // MLP up + down
    ops += d * classes as u64; // classifier head
    if masked {
        // theta, p, Q, K, V, b', u, f gate multiplies
        ops += d + n1 * d + d + n1 * d + n1 * d + d + h + d;
    }
    ops
}

pub fn save_student(path: &Path, student: &StudentCab) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"GCABSTUD")?;
    w.write_u32::<LittleEndian>(1)?;
    w.write_u8(match student.precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    })?;
    let a = &student.arch;
    for v in [a.image_h, a.image_w, a.channels, a.patch, a.embed_dim, a.heads, a.blocks] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_f64::<LittleEndian>(a.mlp_ratio)?;
    w.write_u8(a.classifier_layernorm as u8)?;
    w.write_u64::<LittleEndian>(a.max_tasks as u64)?;
    write_tensor(&mut w, &student.mask_i)?;
    write_tensor(&mut w, &student.mask_2)?;
    write_map(&mut w, &student.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_student(path: &Path) -> Result<StudentCab> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != b"GCABSTUD" {
        return Err(Error::Checkpoint("not a student checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(Error::Checkpoint(format!("unsupported student version {version}")));
    }
    let precision = match r.read_u8()? {
        0 => Precision::F32,
        _ => Precision::F64,
    };
    let mut dims = [0usize; 7];
    for v in &mut dims {
        *v = r.read_u64::<LittleEndian>()? as usize;
    }
    let mlp_ratio = r.read_f64::<LittleEndian>()?;
    let classifier_layernorm = r.read_u8()? != 0;
    let max_tasks = r.read_u64::<LittleEndian>()? as usize;
    let mask_i = read_tensor(&mut r)?;
    let mask_2 = read_tensor(&mut r)?;
    let params = read_map(&mut r)?;
    Ok(StudentCab {
        arch: Arch {
            image_h: dims[0],
            image_w: dims[1],
            channels: dims[2],
            patch: dims[3],
            embed_dim: dims[4],
            heads: dims[5],
            blocks: dims[6],
            mlp_ratio,
            classifier_layernorm,
            max_tasks,
        },
        precision,
        params,
        mask_i,
        mask_2,
    })
}
