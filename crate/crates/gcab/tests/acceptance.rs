//! Acceptance gate: ten end-to-end criteria, one `[PASS]`/`[FAIL]` line
//! each. Numeric tolerances are pinned in the assertions; the training
//! criteria (6-8, 10) run real desk-scale experiments and stay within a
//! few minutes of single-core CPU time.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gcab::config::ExperimentConfig;
use gcab::distill::{cab_op_count, distill, student_predict, DistillConfig};
use gcab::gcab::{
    cab_forward, gcab_forward, init_gcab, multi_pass_logits, task_masks, MaskVars,
};
use gcab::harness::{
    build_arch, evaluate, load_data, metrics, run_experiment, split_tasks, train_task,
    write_metrics_csv, AccuracyMatrix, EvalRow, Prediction, TrainOpts,
};
use gcab::checkpoint::{load_checkpoint, save_checkpoint};
use gcab::masks::{anneal_s, build_weight_masks, compute_mask, sparsity_loss, CumulativeMasks};
use gcab::pfr::{cascade_project, cosine_distance_loss, projector_forward};
use gcab::state::{CilState, BB, DEC};
use gcab::tape::{Tape, Var, VarMap};
use gcab::tensor::{Precision, Tensor};
use gcab::vit::{backbone_forward, patchify, Arch};

fn report(line: &str, ok: bool) {
    println!("[{}] {}", if ok { "PASS" } else { "FAIL" }, line);
    assert!(ok, "{line}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            t.set(i, j, rng.gen_range(lo..hi));
        }
    }
    t
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn perturbed(base: &Tensor, dir: &Tensor, eps: f64) -> Tensor {
    base.zip(dir, |x, d| x + eps * d).expect("same shape")
}

fn one_hot(width: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(1, width);
    t.set(0, class, 1.0);
    t
}

// ---------------------------------------------------------------------
// Criterion 1: finite-difference gradient suite
// ---------------------------------------------------------------------

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> gcab::Result<Var>>;

struct FdCase {
    inputs: Vec<Tensor>,
    build: Builder,
}

/// Scalarize non-scalar outputs through sigmoid+sum so every entry's
/// gradient is exercised nonlinearly.
fn scalarize(tape: &mut Tape, v: Var) -> Var {
    if tape.value(v).shape() == (1, 1) {
        v
    } else {
        let s = tape.sigmoid(v).unwrap();
        tape.sum(s).unwrap()
    }
}

fn fd_relative_error(case: &FdCase, rng: &mut ChaCha8Rng) -> f64 {
    let dirs: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|t| rand_tensor(rng, t.rows(), t.cols(), -1.0, 1.0))
        .collect();

    // analytic directional derivative
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars).expect("forward");
    let loss = scalarize(&mut tape, out);
    tape.backward(loss).expect("backward");
    let analytic: f64 = vars
        .iter()
        .zip(&dirs)
        .map(|(&v, d)| tape.grad(v).map(|g| dot(g, d)).unwrap_or(0.0))
        .sum();

    // central finite difference along the same direction
    let eps = 1e-5;
    let eval = |sign: f64| -> f64 {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = case
            .inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| tape.leaf(perturbed(t, d, sign * eps), false))
            .collect();
        let out = (case.build)(&mut tape, &vars).expect("forward");
        let loss = scalarize(&mut tape, out);
        tape.value(loss).get(0, 0)
    };
    let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

/// Eq. 8 composite: BCE over two gated passes + sparsity + projected
/// cosine regularizer, rebuilt from scratch for each evaluation.
struct CompositeSetup {
    arch: Arch,
    params: BTreeMap<String, Tensor>,
    prev_bb: BTreeMap<String, Tensor>,
    cum: CumulativeMasks,
    image: Vec<f64>,
    target: Tensor,
}

fn composite_loss_grads(
    setup: &CompositeSetup,
    params: &BTreeMap<String, Tensor>,
    want_grads: bool,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new(Precision::F64);
    let vm = VarMap::bind(&mut tape, params.iter(), |_| want_grads);
    let vm_prev = VarMap::bind(&mut tape, setup.prev_bb.iter(), |_| false);
    let patches = tape.constant(patchify(&setup.image, &setup.arch).unwrap());
    let feats = backbone_forward(&mut tape, &vm, BB, patches, &setup.arch).unwrap();
    let logits =
        multi_pass_logits(&mut tape, &vm, DEC, &[feats, feats], &[5.0, 3.0], &setup.arch).unwrap();
    let cls = tape.bce_with_logits(logits, setup.target.clone()).unwrap();
    let masks = task_masks(&mut tape, &vm, DEC, 1, 3.0).unwrap();
    let sp = sparsity_loss(&mut tape, masks.m_i, masks.m_2, &setup.cum, 0.05)
        .unwrap()
        .expect("capacity free");
    let prev_feats = backbone_forward(&mut tape, &vm_prev, BB, patches, &setup.arch).unwrap();
    let proj = projector_forward(&mut tape, &vm, 1, feats, 2).unwrap();
    let pfr = cosine_distance_loss(&mut tape, proj, prev_feats, 0.001).unwrap();
    let a = tape.add(cls, sp).unwrap();
    let loss = tape.add(a, pfr).unwrap();
    let value = tape.value(loss).get(0, 0);
    let grads = if want_grads {
        tape.backward(loss).unwrap();
        vm.gradients(&tape)
    } else {
        BTreeMap::new()
    };
    (value, grads)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = 0usize;
    let mut worst = 0.0f64;

    // primitive ops, 8 randomized instances each
    let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(1..=4usize), rng.gen_range(2..=4usize));
    for rep in 0..8 {
        let _ = rep;
        let (r, c) = dims(&mut rng);
        let k = rng.gen_range(1..=4usize);
        let sample = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c, -1.5, 1.5);
        let positive = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c, 0.2, 1.8);

        let mut probs = rand_tensor(&mut rng, r, c, 0.05, 1.0);
        for i in 0..r {
            let z: f64 = probs.row_slice(i).iter().sum();
            for j in 0..c {
                let v = probs.get(i, j) / z;
                probs.set(i, j, v);
            }
        }
        let bce_targets = rand_tensor(&mut rng, 1, c, 0.0, 1.0).map(|x| x.round());
        let xent_target = one_hot(c, rng.gen_range(0..c));

        let suite: Vec<FdCase> = vec![
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.add(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.sub(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.mul(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, 1, c)],
                build: Box::new(|t, v| t.add_row(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, 1, c)],
                build: Box::new(|t, v| t.mul_row(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.add_scalar(v[0], 0.7)),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.scale(v[0], -1.3)),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, k), sample(&mut rng, k, c)],
                build: Box::new(|t, v| t.matmul(v[0], v[1])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.transpose(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.sigmoid(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.silu(v[0])),
            },
            FdCase {
                inputs: vec![positive(&mut rng, r, c)],
                build: Box::new(|t, v| t.log(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.exp(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.softmax_rows(v[0])),
            },
            FdCase {
                inputs: vec![rand_tensor(&mut rng, r, 4, -2.0, 2.0)],
                build: Box::new(|t, v| t.layer_norm_rows(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, 2, c)],
                build: Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c), sample(&mut rng, r, 2)],
                build: Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(move |t, v| t.slice_cols(v[0], 0, c - 1)),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.sum(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(|t, v| t.mean(v[0])),
            },
            FdCase {
                inputs: vec![sample(&mut rng, 1, c)],
                build: Box::new(move |t, v| t.bce_with_logits(v[0], bce_targets.clone())),
            },
            FdCase {
                inputs: vec![sample(&mut rng, 1, c)],
                build: Box::new(move |t, v| t.softmax_xent(v[0], xent_target.clone())),
            },
            FdCase {
                inputs: vec![sample(&mut rng, r, c)],
                build: Box::new(move |t, v| t.kl_from_logits(v[0], probs.clone())),
            },
            FdCase {
                inputs: vec![positive(&mut rng, r, c), positive(&mut rng, r, c)],
                build: Box::new(|t, v| t.cosine_rows(v[0], v[1])),
            },
        ];
        for case in &suite {
            let err = fd_relative_error(case, &mut rng);
            worst = worst.max(err);
            assert!(err < 1e-4, "primitive FD rel err {err}");
            cases += 1;
        }
    }

    // the full Eq. 8 composite loss, 16 randomized directions
    let arch = Arch {
        image_h: 4,
        image_w: 4,
        channels: 1,
        patch: 2,
        embed_dim: 4,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2.0,
        classifier_layernorm: true,
        max_tasks: 2,
    };
    let mut srng = ChaCha8Rng::seed_from_u64(7);
    let mut state = CilState::new(arch.clone(), Precision::F64, 2, &mut srng);
    state.begin_task(2, &mut srng).unwrap();
    state.finalize_task(5.0, false).unwrap();
    state.begin_task(2, &mut srng).unwrap();
    let setup = CompositeSetup {
        arch,
        prev_bb: state.prev_backbone.clone().unwrap(),
        cum: state.cum.clone(),
        image: (0..16).map(|i| 0.3 + 0.04 * i as f64).collect(),
        target: one_hot(4, 3),
        params: state.params.clone(),
    };
    let names: Vec<String> = setup.params.keys().cloned().collect();
    let (_, grads) = composite_loss_grads(&setup, &setup.params, true);
    for i in 0..16 {
        let name = &names[(i * 7) % names.len()];
        let base = &setup.params[name];
        let dir = rand_tensor(&mut rng, base.rows(), base.cols(), -1.0, 1.0);
        let eps = 1e-5;
        let eval = |sign: f64| {
            let mut p = setup.params.clone();
            p.insert(name.clone(), perturbed(base, &dir, sign * eps));
            composite_loss_grads(&setup, &p, false).0
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
        let analytic = grads.get(name).map(|g| dot(g, &dir)).unwrap_or(0.0);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10);
        worst = worst.max(err);
        assert!(err < 1e-4, "composite FD rel err {err} on {name}");
        cases += 1;
    }

    let elapsed = start.elapsed().as_secs_f64();
    report(
        &format!(
            "criterion 1: {cases} finite-difference cases, worst rel err {worst:.2e}, {elapsed:.1}s"
        ),
        cases >= 200 && worst < 1e-4 && elapsed < 60.0,
    );
}

// ---------------------------------------------------------------------
// Criterion 2: gated class-attention oracle (Eq. 3-4)
// ---------------------------------------------------------------------

/// Straight-line reimplementation of the gated decoder pass on plain
/// nested loops; shares nothing with the tape implementation.
fn oracle_gcab(
    p: &BTreeMap<String, Tensor>,
    b: &Tensor,
    m_i: &[f64],
    m_2: &[f64],
    heads: usize,
) -> Vec<f64> {
    let d = m_i.len();
    let theta: Vec<f64> = p["g.theta"].data().to_vec();
    let matvec = |x: &[f64], w: &Tensor, bias: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; w.cols()];
        for (li, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &xv) in x.iter().enumerate() {
                acc += xv * w.get(k, li);
            }
            *o = acc + bias.get(0, li);
        }
        out
    };
    let mask = |x: &[f64], m: &[f64]| -> Vec<f64> {
        x.iter().zip(m).map(|(v, g)| v * g).collect()
    };
    let n = b.rows();
    let mut pm: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pm.push(mask(&theta, m_i));
    for i in 0..n {
        pm.push(mask(b.row_slice(i), m_i));
    }
    let q = mask(&matvec(&pm[0], &p["g.wq"], &p["g.bq"]), m_i);
    let kr: Vec<Vec<f64>> = pm.iter().map(|row| mask(&matvec(row, &p["g.wk"], &p["g.bk"]), m_i)).collect();
    let vr: Vec<Vec<f64>> = pm.iter().map(|row| mask(&matvec(row, &p["g.wv"], &p["g.bv"]), m_i)).collect();
    // multi-head attention with a single (class-token) query row
    let dh = d / heads;
    let scale = 1.0 / (d as f64 / heads as f64).sqrt();
    let mut merged = vec![0.0; d];
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let scores: Vec<f64> = kr
            .iter()
            .map(|krow| q[lo..hi].iter().zip(&krow[lo..hi]).map(|(a, c)| a * c).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (krow, e) in vr.iter().zip(&exps) {
            for (j, slot) in merged[lo..hi].iter_mut().enumerate() {
                *slot += (e / z) * krow[lo + j];
            }
        }
    }
    let o = matvec(&merged, &p["g.wo"], &p["g.bo"]);
    let b_res: Vec<f64> = o.iter().zip(&theta).map(|(a, t)| a + t).collect();
    let u = mask(&matvec(&mask(&b_res, m_i), &p["g.w1"], &p["g.b1"]), m_2);
    let vv = matvec(&u, &p["g.w2"], &p["g.b2"]);
    vv.iter().zip(&o).map(|(a, c)| a + c).collect()
}

#[test]
fn criterion_2_gcab_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut exact_ones = true;
    for case in 0..50 {
        let heads = if case % 2 == 0 { 1 } else { 2 };
        let d = heads * rng.gen_range(1..=3usize) * 2;
        let arch = Arch {
            image_h: 4,
            image_w: 4,
            channels: 1,
            patch: 2,
            embed_dim: d,
            heads,
            blocks: 1,
            mlp_ratio: 2.0,
            classifier_layernorm: true,
            max_tasks: 1,
        };
        let mut params = BTreeMap::new();
        init_gcab(&mut params, "g", &arch, &mut rng);
        let n = rng.gen_range(1..=4usize);
        let b = rand_tensor(&mut rng, n, d, -1.0, 1.0);
        let all_ones = case % 10 == 9;
        let hidden = arch.mlp_hidden();
        let (mi, m2) = if all_ones {
            (vec![1.0; d], vec![1.0; hidden])
        } else {
            (
                (0..d).map(|_| rng.gen_range(0.0..1.0)).collect(),
                (0..hidden).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        };

        let mut tape = Tape::new(Precision::F64);
        let vm = VarMap::bind(&mut tape, params.iter(), |_| false);
        let bv = tape.constant(b.clone());
        let masks = MaskVars {
            m_i: tape.constant(Tensor::row(mi.clone())),
            m_2: tape.constant(Tensor::row(m2.clone())),
        };
        let f = gcab_forward(&mut tape, &vm, "g", bv, &masks, &arch).unwrap();
        let got = tape.value(f).data().to_vec();

        let want = oracle_gcab(&params, &b, &mi, &m2, heads);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }

        if all_ones {
            let unmasked = cab_forward(&mut tape, &vm, "g", bv, &arch).unwrap();
            let um = tape.value(unmasked).data();
            exact_ones &= got.iter().zip(um).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    report(
        &format!("criterion 2: 50 gated-attention oracle cases, worst abs err {worst:.2e}, all-ones bitwise match {exact_ones}"),
        worst < 1e-10 && exact_ones,
    );
}

// ---------------------------------------------------------------------
// Criterion 3: appendix freeze exactness
// ---------------------------------------------------------------------

#[test]
fn criterion_3_freeze_exactness() {
    let toml = r#"
name = "accept-freeze"
seed = 7
precision = "f64"

[arch]
patch = 4
embed_dim = 8
heads = 2
blocks = 1
mlp_ratio = 2.0
classifier_layernorm = false

[data]
source = "synth"
num_classes = 4
per_class = 10
image_size = 8
difficulty = 0.3

[split]
scheme = "equal"
tasks = 2

[train]
epochs = 3
lr = 2e-4
batch_size = 5
lambda_pfr = 0.0

[ablation]
gca = true
backbone_reg = "none"
fdc = false
freeze_backbone_after_task1 = true
binarize_at_accumulate = true
"#;
    let cfg = ExperimentConfig::from_toml(toml).unwrap();
    let (train, test) = load_data(&cfg).unwrap();
    let seq = split_tasks(&train, &test, &cfg.split, cfg.seed).unwrap();
    let arch = build_arch(&cfg, &train).unwrap();
    let opts = TrainOpts::from_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = CilState::new(arch, cfg.precision.as_precision(), 0, &mut rng);

    train_task(&mut state, &seq.tasks[0], &opts, &mut rng).unwrap();
    let params0 = state.params.clone();
    let cum0 = state.cum.clone();
    let logits0: Vec<Vec<f64>> = seq.tasks[0]
        .test
        .iter()
        .map(|(img, _)| gcab::harness::predict_image(&state, &opts, img, 0).unwrap())
        .collect();

    train_task(&mut state, &seq.tasks[1], &opts, &mut rng).unwrap();

    // (a) every weight entry whose appendix gate is 0 is bitwise unchanged
    let gates = build_weight_masks(&cum0, DEC, &state.head_class_counts, 1, state.arch.max_tasks);
    let mut frozen_entries = 0usize;
    let mut frozen_ok = true;
    for (name, gate) in &gates {
        let before = &params0[name];
        let after = &state.params[name];
        for (idx, &g) in gate.data().iter().enumerate() {
            if g == 0.0 {
                frozen_entries += 1;
                frozen_ok &= before.data()[idx].to_bits() == after.data()[idx].to_bits();
            }
        }
    }

    // (b) frozen backbone => task-1 logits bitwise identical after task 2
    let c0 = state.head_class_counts[0];
    let mut logits_ok = true;
    for ((img, _), old) in seq.tasks[0].test.iter().zip(&logits0) {
        let now = gcab::harness::predict_image(&state, &opts, img, 1).unwrap();
        logits_ok &= now[..c0]
            .iter()
            .zip(&old[..c0])
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    report(
        &format!("criterion 3: {frozen_entries} gated weight entries bitwise frozen, task-1 logits bitwise stable after task 2"),
        frozen_ok && logits_ok && frozen_entries > 0,
    );
}

// ---------------------------------------------------------------------
// Criterion 4: sparsity / mask / annealing hand values
// ---------------------------------------------------------------------

#[test]
fn criterion_4_hand_values() {
    // annealing endpoints are exact, midpoint matches the hand value
    let lo = anneal_s(1, 10, 800.0);
    let hi = anneal_s(10, 10, 800.0);
    let mid = anneal_s(5, 9, 800.0); // frac = 0.5
    let anneal_ok = lo == 1.0 / 800.0
        && hi == 800.0
        && (mid - 400.000625).abs() < 1e-12
        && anneal_s(1, 1, 800.0) == 800.0;

    // Eq. 2 sigmoid mask at s = 2 on embedding column [0.3, -0.2]
    let mut emb = Tensor::zeros(2, 1);
    emb.set(0, 0, 0.3);
    emb.set(1, 0, -0.2);
    let mut tape = Tape::new(Precision::F64);
    let e = tape.leaf(emb, false);
    let m = compute_mask(&mut tape, e, 0, 2.0).unwrap();
    let mv = tape.value(m).data().to_vec();
    let mask_ok =
        (mv[0] - 0.6456563062257954).abs() < 1e-12 && (mv[1] - 0.401312339887548).abs() < 1e-12;

    // Eq. 5 on fresh capacity: lambda * sum(m) / free-unit count
    let mi = tape.constant(Tensor::row(vec![0.5, 0.25]));
    let m2 = tape.constant(Tensor::row(vec![1.0, 0.0, 0.75]));
    let cum = CumulativeMasks::empty(2, 3);
    let sp = sparsity_loss(&mut tape, mi, m2, &cum, 0.05).unwrap().unwrap();
    let sparsity_ok = (tape.value(sp).get(0, 0) - 0.025).abs() < 1e-12;

    report(
        "criterion 4: sparsity/mask/anneal hand values at 1e-12, anneal endpoints exactly 1/800 and 800",
        anneal_ok && mask_ok && sparsity_ok,
    );
}

// ---------------------------------------------------------------------
// Criterion 5: cascade ordering (Eq. 7)
// ---------------------------------------------------------------------

#[test]
fn criterion_5_cascade_closed_form() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut params = BTreeMap::new();
    for t in 1..=3 {
        params.insert(format!("proj{t}.l1.w"), rand_tensor(&mut rng, d, d, -1.0, 1.0));
        params.insert(format!("proj{t}.l1.b"), rand_tensor(&mut rng, 1, d, -0.5, 0.5));
    }
    let x = rand_tensor(&mut rng, 3, d, -1.0, 1.0);

    let mut tape = Tape::new(Precision::F64);
    let vm = VarMap::bind(&mut tape, params.iter(), |_| false);
    let xv = tape.constant(x.clone());
    let y = cascade_project(&mut tape, &vm, xv, 0, 3, 1).unwrap();
    let got = tape.value(y).clone();

    // closed form: ((x W3 + b3) W2 + b2) W1 + b1, row by row
    let mut worst = 0.0f64;
    for i in 0..x.rows() {
        let mut row: Vec<f64> = x.row_slice(i).to_vec();
        for t in [3usize, 2, 1] {
            let w = &params[&format!("proj{t}.l1.w")];
            let b = &params[&format!("proj{t}.l1.b")];
            let mut nxt = vec![0.0; d];
            for (l, slot) in nxt.iter_mut().enumerate() {
                *slot = b.get(0, l) + (0..d).map(|k| row[k] * w.get(k, l)).sum::<f64>();
            }
            row = nxt;
        }
        for (l, want) in row.iter().enumerate() {
            worst = worst.max((got.get(i, l) - want).abs());
        }
    }

    let same = cascade_project(&mut tape, &vm, xv, 3, 3, 1).unwrap();
    let identity_ok = tape.value(same).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    report(
        &format!("criterion 5: cascade matches 3-projector closed form (worst abs err {worst:.2e}), s = t is the exact identity"),
        worst < 1e-10 && identity_ok,
    );
}

// ---------------------------------------------------------------------
// Criteria 6+7: desk-scale Table-3 ordering and capacity monotonicity
// ---------------------------------------------------------------------

fn tiny10_toml(name: &str, seed: u64, ablation: &str) -> String {
    format!(
        r#"
name = "{name}"
seed = {seed}
precision = "f64"

[arch]
patch = 4
embed_dim = 64
heads = 4
blocks = 1
mlp_ratio = 2.0

[data]
source = "synth"
num_classes = 10
per_class = 50
image_size = 8
difficulty = 0.3

[split]
scheme = "equal"
tasks = 5

[train]
epochs = 12
lr = 2e-4
batch_size = 10
lambda_pfr = 1.0
lambda_gcab = 0.01
distill_epochs = 60

{ablation}
"#
    )
}

fn mean_tag(ablation: &str) -> f64 {
    let mut acc = 0.0;
    for seed in 1..=3u64 {
        let cfg = ExperimentConfig::from_toml(&tiny10_toml("accept6", seed, ablation)).unwrap();
        acc += run_experiment(&cfg).unwrap().metrics.acc_tag;
    }
    acc / 3.0
}

#[test]
fn criterion_6_table3_ordering() {
    let start = Instant::now();
    let full = mean_tag("");
    let gca_only = mean_tag("[ablation]\ngca = true\nbackbone_reg = \"none\"\nfdc = false");
    let plain = mean_tag("[ablation]\ngca = false\nbackbone_reg = \"none\"\nfdc = false");
    let no_fdc = mean_tag("[ablation]\ngca = true\nbackbone_reg = \"pfr2\"\nfdc = false");
    let elapsed = start.elapsed().as_secs_f64();
    report(
        &format!(
            "criterion 6: mean ACC_TAG full {full:.1} > gca-only {gca_only:.1} > plain {plain:.1} (gaps >= 5), no-FDC {no_fdc:.1} trails full by >= 10; {elapsed:.0}s"
        ),
        full - gca_only >= 5.0
            && gca_only - plain >= 5.0
            && full - no_fdc >= 10.0
            && elapsed < 900.0,
    );
}

#[test]
fn criterion_7_capacity_monotone() {
    let cfg = ExperimentConfig::from_toml(&tiny10_toml("accept7", 1, "")).unwrap();
    let outcome = run_experiment(&cfg).unwrap();
    let series = |name: &str| -> Vec<f64> {
        outcome
            .capacity
            .iter()
            .map(|snap| snap.iter().find(|(n, _)| n == name).unwrap().1)
            .collect()
    };
    let mut monotone = true;
    for name in ["m_i", "m_2", "aggregate"] {
        let vals = series(name);
        monotone &= vals.windows(2).all(|w| w[1] >= w[0]);
    }
    let agg = series("aggregate");
    let first_inc = agg[0];
    let largest_first = agg
        .windows(2)
        .all(|w| first_inc > w[1] - w[0]);
    report(
        &format!(
            "criterion 7: capacity usage non-decreasing, first-task increment {first_inc:.3} strictly largest (aggregate {agg:?})"
        ),
        monotone && largest_first,
    );
}

// ---------------------------------------------------------------------
// Criterion 8: GCAB distillation
// ---------------------------------------------------------------------

#[test]
fn criterion_8_distillation() {
    let toml = tiny10_toml("accept8", 2, "").replace("tasks = 5", "tasks = 2");
    let cfg = ExperimentConfig::from_toml(&toml).unwrap();
    let opts = TrainOpts::from_config(&cfg);
    let outcome = run_experiment(&cfg).unwrap();
    let teacher_tag = outcome.metrics.acc_tag;

    let student_tag = |capacity: f64| -> f64 {
        let mut dcfg = DistillConfig::new(capacity);
        dcfg.epochs = 60;
        dcfg.temperature = 2.0;
        dcfg.lr = cfg.train.distill_lr;
        dcfg.batch_size = cfg.train.batch_size;
        dcfg.seed = 9;
        let (student, _) =
            distill(&outcome.state, &opts, &outcome.sequence.tasks[1].train, &dcfg).unwrap();
        let (mut hits, mut n) = (0usize, 0usize);
        for task in &outcome.sequence.tasks {
            for (img, label) in &task.test {
                let logits = student_predict(&outcome.state, &student, img).unwrap();
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                hits += usize::from(pred == *label);
                n += 1;
            }
        }
        100.0 * hits as f64 / n as f64
    };

    let s10 = student_tag(1.0);
    let s08 = student_tag(0.8);
    let s06 = student_tag(0.6);

    let ops_student = cab_op_count(&outcome.state.arch, 10, true);
    let ops_plain = cab_op_count(&outcome.state.arch, 10, false);
    let overhead = ops_student as f64 / ops_plain as f64 - 1.0;

    report(
        &format!(
            "criterion 8: teacher {teacher_tag:.1} vs student {s10:.1}/{s08:.1}/{s06:.1} at kappa 1.0/0.8/0.6, op overhead {:.2}%",
            overhead * 100.0
        ),
        (teacher_tag - s10).abs() <= 2.0 && s10 >= s08 && s08 >= s06 && overhead.abs() < 0.05,
    );
}

// ---------------------------------------------------------------------
// Criterion 9: metrics oracle
// ---------------------------------------------------------------------

#[test]
fn criterion_9_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut all_ok = true;
    for _ in 0..20 {
        let stages = rng.gen_range(2..=5usize);
        // power-of-two counts keep every percentage exactly representable
        let counts: Vec<usize> = (0..stages).map(|_| [4usize, 8, 16][rng.gen_range(0..3)]).collect();

        // raw predictions: per stage and data task, one (pred, taw-pred) pair per sample
        let mut preds: Vec<Vec<Vec<Prediction>>> = Vec::new();
        for s in 0..stages {
            let mut stage_rows = Vec::new();
            for t in 0..=s {
                let n = counts[t];
                let rows: Vec<Prediction> = (0..n)
                    .map(|_| {
                        let truth = rng.gen_range(0..10usize);
                        Prediction {
                            data_task: t,
                            true_class: truth,
                            pred_class: if rng.gen_bool(0.6) { truth } else { (truth + 1) % 10 },
                            pred_taw: if rng.gen_bool(0.8) { truth } else { (truth + 1) % 10 },
                        }
                    })
                    .collect();
                stage_rows.push(rows);
            }
            preds.push(stage_rows);
        }

        // harness path: count into EvalRows, then metrics()
        let mut matrix = AccuracyMatrix::default();
        for stage_rows in &preds {
            let mut row = EvalRow {
                tag: Vec::new(),
                taw: Vec::new(),
                counts: Vec::new(),
                predictions: Vec::new(),
            };
            for rows in stage_rows {
                let tag_hits = rows.iter().filter(|p| p.pred_class == p.true_class).count();
                let taw_hits = rows.iter().filter(|p| p.pred_taw == p.true_class).count();
                row.tag.push(100.0 * tag_hits as f64 / rows.len() as f64);
                row.taw.push(100.0 * taw_hits as f64 / rows.len() as f64);
                row.counts.push(rows.len());
            }
            matrix.push_row(&row).unwrap();
        }
        let got = metrics(&matrix).unwrap();

        // independent brute-force counter over the raw predictions
        let cum_acc: Vec<f64> = preds
            .iter()
            .map(|stage_rows| {
                let hits: usize = stage_rows
                    .iter()
                    .flat_map(|rows| rows.iter())
                    .filter(|p| p.pred_class == p.true_class)
                    .count();
                let n: usize = stage_rows.iter().map(|r| r.len()).sum();
                100.0 * hits as f64 / n as f64
            })
            .collect();
        let mut best = f64::NEG_INFINITY;
        let forgetting: Vec<f64> = cum_acc
            .iter()
            .map(|&a| {
                best = best.max(a);
                best - a
            })
            .collect();
        let final_stage = preds.last().unwrap();
        let taw_sum: f64 = final_stage
            .iter()
            .map(|rows| {
                let h = rows.iter().filter(|p| p.pred_taw == p.true_class).count();
                100.0 * h as f64 / rows.len() as f64
            })
            .sum();
        let acc_taw = taw_sum / final_stage.len() as f64;
        let acc_avg = cum_acc.iter().sum::<f64>() / stages as f64;

        all_ok &= got.acc_tag == cum_acc[stages - 1]
            && got.acc_taw == acc_taw
            && got.acc_avg == acc_avg
            && got.cumulative_acc == cum_acc
            && got.cumulative_forgetting == forgetting;
    }
    report(
        "criterion 9: 20 randomized prediction matrices, harness metrics equal brute-force counts exactly",
        all_ok,
    );
}

// ---------------------------------------------------------------------
// Criterion 10: reproducibility and checkpoint round trip
// ---------------------------------------------------------------------

#[test]
fn criterion_10_reproducibility() {
    let toml = r#"
name = "accept-repro"
seed = 3
precision = "f64"

[arch]
patch = 4
embed_dim = 16
heads = 2
blocks = 1
mlp_ratio = 2.0

[data]
source = "synth"
num_classes = 4
per_class = 10
image_size = 8
difficulty = 0.3

[split]
scheme = "equal"
tasks = 2

[train]
epochs = 2
lr = 2e-4
batch_size = 5
"#;
    let cfg = ExperimentConfig::from_toml(toml).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let run_csv = |path: &std::path::Path| {
        let outcome = run_experiment(&cfg).unwrap();
        write_metrics_csv(
            path,
            &cfg.hash(),
            cfg.seed,
            &outcome.matrix,
            &outcome.metrics,
            &outcome.capacity,
        )
        .unwrap();
        outcome
    };
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let outcome = run_csv(&a);
    run_csv(&b);
    let csv_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    // checkpoint round trip: parameters and inference outputs bitwise
    let ckpt_path = dir.path().join("model.ckpt");
    let rng = ChaCha8Rng::seed_from_u64(42);
    save_checkpoint(&ckpt_path, &outcome.state, toml, &cfg.hash(), &rng, None).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    let params_ok = loaded.state.params.len() == outcome.state.params.len()
        && loaded.state.params.iter().all(|(k, v)| {
            outcome.state.params[k]
                .data()
                .iter()
                .zip(v.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        });

    let opts = TrainOpts::from_config(&cfg);
    let eval_row_before = evaluate(&outcome.state, &outcome.sequence.tasks, 1, &opts).unwrap();
    let eval_row_after = evaluate(&loaded.state, &outcome.sequence.tasks, 1, &opts).unwrap();
    let logits_ok = outcome.sequence.tasks.iter().all(|task| {
        task.test.iter().all(|(img, _)| {
            let x = gcab::harness::predict_image(&outcome.state, &opts, img, 1).unwrap();
            let y = gcab::harness::predict_image(&loaded.state, &opts, img, 1).unwrap();
            x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }) && eval_row_before.tag == eval_row_after.tag;

    report(
        "criterion 10: identical config+seed gives identical metrics CSV; checkpoint round trip is bitwise",
        csv_ok && params_ok && logits_ok,
    );
}
