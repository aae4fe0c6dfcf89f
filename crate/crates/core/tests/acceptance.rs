//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. All tolerances and budgets are pinned
//! below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ramwalk::diffcore::{Tape, Tensor, Var};
use ramwalk::metrics::{self, evaluate_dataset, iou};
use ramwalk::model::{FrameOutput, Model, ModelConfig};
use ramwalk::tracker::{
    occluded_step, predict_box, refine_box, track_sequence, Detection, Layout, OccludedOutcome, RefineOffset,
    Termination, Track, TrackRecord, TrackerConfig, TrackerSession, WalkPolicy,
};
use ramwalk::trainer::{objective, sequence_gradients, train, walker_mass, TrainConfig};
use ramwalk::walk::{
    self, affinity_global, affinity_local, local_graph, rollout_var, Grid, LossWeights, TransitionMatrix,
    TransitionVar,
};
use ramwalk::worldgen::{
    generate_many, generate_sequence, BBox, ObjectTrack, ScenarioConfig, SceneSequence, TrackEntry,
    VisibilityState,
};

const FD_STEP: f64 = 1e-5;
const OP_REL_TOL: f64 = 1e-4;
const E2E_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-6;
const MASS_TOL: f64 = 1e-6;
const EQUIV_TOL: f64 = 1e-6;
const ROLLOUT_STEPS: usize = 120;
const EQUIV_FIXTURES: u64 = 20;
const ORACLE_CHAINS: u64 = 50;

const GRAD_BUDGET: Duration = Duration::from_secs(30);
const STOCH_BUDGET: Duration = Duration::from_secs(10);
const EQUIV_BUDGET: Duration = Duration::from_secs(30);
const EMERGENCE_BUDGET: Duration = Duration::from_secs(20 * 60);

const TRAIN_SEQUENCES: usize = 200;
const HELD_OUT: usize = 50;
const HELD_OUT_SEED: u64 = 1_000_000;
const RECOVERY_MARGIN: f64 = 0.15;
const CARRY_L1: f64 = 2.0;
const CARRY_RATE: f64 = 0.6;

/// Channel plan and schedule of the two smoke tests.
fn smoke_model() -> ModelConfig {
    ModelConfig {
        feat_channels: 8,
        mem_channels: 16,
        embed_channels: 8,
        ..ModelConfig::default()
    }
}

fn smoke_train(loss: LossWeights, seq_len: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 5,
        seq_len,
        loss,
        ..TrainConfig::default()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn unit_rows(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(&[m, d], rng, -1.0, 1.0);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn distribution(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------- 1

/// Scalar probe `sum(out * w)` with fixed weights, so every output element
/// receives a distinct upstream gradient.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(out), &mut rng, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Largest relative error between tape and central-difference gradients.
fn fd_max_rel(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let back = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = back.wrt(&tape, vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let away_from_zero = |r: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let v = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    };
    let grid = Grid::new(2, 3);
    let graph = local_graph(grid, 2.0).unwrap();
    let nnz = graph.nnz();
    let g1 = graph.clone();
    let g2 = graph.clone();
    vec![
        ("add", vec![random(&[3, 4], r, -1.0, 1.0), random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.add(v[0], v[1]).unwrap(); probe(t, o, 1) }) as Build),
        ("sub", vec![random(&[3, 4], r, -1.0, 1.0), random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.sub(v[0], v[1]).unwrap(); probe(t, o, 2) })),
        ("mul", vec![random(&[3, 4], r, -1.0, 1.0), random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.mul(v[0], v[1]).unwrap(); probe(t, o, 3) })),
        ("affine", vec![random(&[5], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.affine(v[0], 1.5, -0.3); probe(t, o, 4) })),
        ("scale", vec![random(&[5], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.scale(v[0], -2.0); probe(t, o, 5) })),
        ("sigmoid", vec![random(&[6], r, -2.0, 2.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.sigmoid(v[0]); probe(t, o, 6) })),
        ("tanh", vec![random(&[6], r, -2.0, 2.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.tanh(v[0]); probe(t, o, 7) })),
        ("relu", vec![away_from_zero(r, &[8])],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.relu(v[0]); probe(t, o, 8) })),
        ("exp", vec![random(&[6], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.exp(v[0]); probe(t, o, 9) })),
        ("log", vec![random(&[6], r, 0.5, 2.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.log(v[0]); probe(t, o, 10) })),
        ("log_clamped", vec![random(&[6], r, 0.5, 2.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.log_clamped(v[0], 1e-3); probe(t, o, 11) })),
        ("sum", vec![random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let s = t.sum(v[0]); let o = t.mul(s, s).unwrap(); probe(t, o, 12) })),
        ("reshape", vec![random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.reshape(v[0], &[2, 6]).unwrap(); probe(t, o, 13) })),
        ("transpose", vec![random(&[3, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.transpose(v[0]).unwrap(); probe(t, o, 14) })),
        ("matmul", vec![random(&[3, 4], r, -1.0, 1.0), random(&[4, 2], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.matmul(v[0], v[1]).unwrap(); probe(t, o, 15) })),
        ("vecmat", vec![random(&[4], r, -1.0, 1.0), random(&[4, 4], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.vecmat(v[0], v[1]).unwrap(); probe(t, o, 16) })),
        ("concat", vec![random(&[2, 3], r, -1.0, 1.0), random(&[1, 3], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.concat(&[v[0], v[1]]).unwrap(); probe(t, o, 17) })),
        ("gather", vec![random(&[6], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.gather(v[0], &[5, 0, 0, 3]).unwrap(); probe(t, o, 18) })),
        ("conv2d", vec![random(&[2, 5, 5], r, -1.0, 1.0), random(&[3, 2, 3, 3], r, -1.0, 1.0), random(&[3], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.conv2d(v[0], v[1], v[2]).unwrap(); probe(t, o, 19) })),
        ("maxpool2d", vec![random(&[2, 6, 6], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.maxpool2d(v[0], 2, 2).unwrap(); probe(t, o, 20) })),
        ("softmax_rows", vec![random(&[3, 5], r, -0.5, 0.5)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.softmax_rows(v[0], 0.1).unwrap(); probe(t, o, 21) })),
        ("l2_normalize_rows", vec![random(&[4, 3], r, -1.0, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| { let o = t.l2_normalize_rows(v[0]).unwrap(); probe(t, o, 22) })),
        ("local_affinity", vec![random(&[6, 3], r, -0.5, 0.5), random(&[6, 3], r, -0.5, 0.5)],
            Box::new(move |t: &mut Tape, v: &[Var]| { let o = t.local_affinity(v[0], v[1], 0.1, g1.clone()).unwrap(); probe(t, o, 23) })),
        ("local_walk", vec![random(&[6], r, 0.0, 1.0), random(&[nnz], r, 0.0, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| { let o = t.local_walk(v[0], v[1], g2.clone()).unwrap(); probe(t, o, 24) })),
    ]
}

/// Two 4x4 frames, two 1x1 targets each moving one pixel; the second is
/// hidden in frame 1 so the overlap term is active.
fn micro_sequence() -> SceneSequence {
    let paths = [[(0usize, 0usize), (1, 0)], [(2, 0), (2, 1)]];
    let mut frames = Vec::new();
    for t in 0..2 {
        let mut f = Tensor::zeros(&[4, 4, 4]);
        for (k, p) in paths.iter().enumerate() {
            if (k, t) == (1, 1) {
                continue;
            }
            let (x, y) = p[t];
            f.data_mut()[y * 4 + x] = 1.0;
            f.data_mut()[3 * 16 + y * 4 + x] = 0.8;
        }
        frames.push(f);
    }
    let tracks = paths
        .iter()
        .enumerate()
        .map(|(i, p)| ObjectTrack {
            object_id: i as u32,
            entries: p
                .iter()
                .enumerate()
                .map(|(t, &(x, y))| {
                    let bbox = BBox::new(x as f64, y as f64, 1.0, 1.0);
                    Some(TrackEntry {
                        center: bbox.center(),
                        bbox,
                        state: if (i, t) == (1, 1) {
                            VisibilityState::Occluded
                        } else {
                            VisibilityState::Visible
                        },
                    })
                })
                .collect(),
        })
        .collect();
    SceneSequence {
        frames,
        tracks,
        props: vec![],
        seed: 0,
        config: ScenarioConfig {
            height: 4,
            width: 4,
            length: 2,
            ..ScenarioConfig::default()
        },
    }
}

/// Full objective: tape gradients of every parameter against central
/// differences of the recomputed loss.
fn objective_max_rel(weights: &LossWeights) -> f64 {
    let seq = micro_sequence();
    let cfg = ModelConfig {
        feat_channels: 3,
        mem_channels: 4,
        embed_channels: 3,
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    // zero-initialized biases on blank pixels sit exactly on relu kinks and
    // on the zero-norm branch of the embedding normalization; jitter every
    // parameter so the check runs at a differentiable point
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let (parts, grads) = sequence_gradients(&model, &seq, 2, weights, |_| true).unwrap();
    assert!(parts.ram > 0.0 && parts.over > 0.0, "micro instance must exercise every term: {parts:?}");
    let loss = |m: &Model| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| false);
        let v = objective(m, &mut tape, &b, &seq, 2, weights).unwrap();
        tape.value(v.total).item()
    };
    let mut worst: f64 = 0.0;
    for id in ids {
        for i in 0..model.params().get(id).numel() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss(&model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.get(id).data()[i], numeric));
        }
    }
    worst
}

fn criterion_gradients() -> String {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, build) in op_cases() {
        let e = fd_max_rel(&inputs, &*build);
        assert!(e < OP_REL_TOL, "{name}: relative error {e:e}");
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }
    let local = objective_max_rel(&LossWeights {
        radius_frac: Some(0.5),
        ..LossWeights::default()
    });
    let global = objective_max_rel(&LossWeights {
        radius_frac: None,
        ..LossWeights::default()
    });
    assert!(local < E2E_REL_TOL, "objective with local attention: relative error {local:e}");
    assert!(global < E2E_REL_TOL, "objective with global attention: relative error {global:e}");
    let took = start.elapsed();
    assert!(took < GRAD_BUDGET, "took {took:?}");
    format!(
        "worst op {} {:.1e}, objective {:.1e} local / {:.1e} global, {:.1}s",
        worst_op.0,
        worst_op.1,
        local,
        global,
        took.as_secs_f64()
    )
}

// ---------------------------------------------------------------- 2

fn criterion_stochasticity() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Grid::new(10, 10);
    let m = grid.nodes();
    let embeds: Vec<Tensor> = (0..=ROLLOUT_STEPS).map(|_| unit_rows(m, 8, &mut rng)).collect();
    let mut worst_row: f64 = 0.0;
    let mut dense = Vec::new();
    let mut local = Vec::new();
    for p in embeds.windows(2) {
        let g = affinity_global(&p[0], &p[1], 0.1).unwrap();
        let l = affinity_local(&p[0], &p[1], 0.1, grid, grid.default_radius()).unwrap();
        for a in [&g, &l] {
            for s in a.row_sums() {
                worst_row = worst_row.max((s - 1.0).abs());
            }
        }
        dense.push(g);
        local.push(l);
    }
    assert!(worst_row < ROW_SUM_TOL, "row sum off by {worst_row:e}");

    let mut worst_mass: f64 = 0.0;
    let x0 = distribution(m, &mut rng);
    for chain in [&dense, &local] {
        for x in walk::rollout(&x0, chain).unwrap() {
            worst_mass = worst_mass.max((x.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let seq = generate_sequence(
        &ScenarioConfig {
            length: ROLLOUT_STEPS + 1,
            ..ScenarioConfig::pass_behind()
        },
        3,
    )
    .unwrap();
    let model = Model::new(ModelConfig {
        feat_channels: 4,
        mem_channels: 8,
        embed_channels: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    for mass in walker_mass(&model, &seq, ROLLOUT_STEPS + 1, &LossWeights::default()).unwrap() {
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    assert!(worst_mass < MASS_TOL, "mass drift {worst_mass:e}");
    let took = start.elapsed();
    assert!(took < STOCH_BUDGET, "took {took:?}");
    format!(
        "max row error {worst_row:.1e}, max mass drift {worst_mass:.1e} over {ROLLOUT_STEPS} steps, {:.1}s",
        took.as_secs_f64()
    )
}

// ---------------------------------------------------------------- 3

fn criterion_local_global() -> String {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..EQUIV_FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + k);
        let grid = Grid::new(rng.gen_range(2..=6), rng.gen_range(2..=6));
        let m = grid.nodes();
        let d = rng.gen_range(2..=8);
        let steps = rng.gen_range(1..=6);
        // the neighborhood is strict, so the smallest covering radius is diameter + 1
        let radius = (grid.l1_diameter() + 1) as f64 + rng.gen_range(0.0..3.0);
        let embeds: Vec<Tensor> = (0..=steps).map(|_| unit_rows(m, d, &mut rng)).collect();
        let mut dense = Vec::new();
        let mut local = Vec::new();
        for p in embeds.windows(2) {
            dense.push(affinity_global(&p[0], &p[1], 0.1).unwrap());
            local.push(affinity_local(&p[0], &p[1], 0.1, grid, radius).unwrap());
        }
        let x0 = distribution(m, &mut rng);
        let a = walk::rollout(&x0, &dense).unwrap();
        let b = walk::rollout(&x0, &local).unwrap();
        for (xa, xb) in a.iter().zip(&b) {
            for (u, v) in xa.iter().zip(xb) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    assert!(worst < EQUIV_TOL, "max per-cell difference {worst:e}");
    let took = start.elapsed();
    assert!(took < EQUIV_BUDGET, "took {took:?}");
    format!("{EQUIV_FIXTURES} fixtures, max per-cell difference {worst:.1e}, {:.1}s", took.as_secs_f64())
}

// ---------------------------------------------------------------- 4

/// Naive chain product `x <- x A`, accumulating over sources in ascending order.
fn oracle_chain(x0: &[f64], mats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = x0.len();
    let mut out = vec![x0.to_vec()];
    for a in mats {
        let x = out.last().unwrap();
        let mut y = vec![0.0; m];
        for (j, yj) in y.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *yj += xi * a[i * m + j];
            }
        }
        out.push(y);
    }
    out
}

fn criterion_oracle_products() -> String {
    let mut cells = 0;
    for k in 0..ORACLE_CHAINS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k);
        let (h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=4));
        let grid = Grid::new(h, w);
        let m = grid.nodes();
        let len = rng.gen_range(1..=6);
        let x0 = distribution(m, &mut rng);

        let raw: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..m).flat_map(|_| distribution(m, &mut rng)).collect())
            .collect();
        let dense: Vec<TransitionMatrix> = raw
            .iter()
            .map(|d| TransitionMatrix::dense(m, d.clone()).unwrap())
            .collect();
        let want = oracle_chain(&x0, &raw);
        assert_eq!(walk::rollout(&x0, &dense).unwrap(), want, "dense chain {k}");

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[m], x0.clone()).unwrap());
        let tv: Vec<TransitionVar> = raw
            .iter()
            .map(|d| TransitionVar::Dense(tape.constant(Tensor::new(&[m, m], d.clone()).unwrap())))
            .collect();
        let got: Vec<Vec<f64>> = rollout_var(&mut tape, xv, &tv)
            .unwrap()
            .iter()
            .map(|&v| tape.value(v).data().to_vec())
            .collect();
        assert_eq!(got, want, "differentiable chain {k}");

        let d = rng.gen_range(2..=4);
        let radius = rng.gen_range(1.0..3.0);
        let embeds: Vec<Tensor> = (0..=len).map(|_| unit_rows(m, d, &mut rng)).collect();
        let local: Vec<TransitionMatrix> = embeds
            .windows(2)
            .map(|p| affinity_local(&p[0], &p[1], 0.1, grid, radius).unwrap())
            .collect();
        let local_dense: Vec<Vec<f64>> = local.iter().map(|a| a.to_dense().data().to_vec()).collect();
        assert_eq!(walk::rollout(&x0, &local).unwrap(), oracle_chain(&x0, &local_dense), "local chain {k}");
        cells += 3 * (len + 1) * m;
    }
    format!("{ORACLE_CHAINS} chains (dense, tape, local), {cells} cells bit-identical")
}

// ---------------------------------------------------------------- 5

fn det(x: f64, y: f64, conf: f64) -> Detection {
    Detection {
        cell: 0,
        center: (x, y),
        bbox: BBox::centered(x, y, 2.0, 2.0),
        confidence: conf,
    }
}

fn frame_output(h: usize, w: usize, peaks: &[(usize, f64)]) -> FrameOutput {
    let mut heat = Tensor::full(&[h, w], 0.01);
    for &(i, v) in peaks {
        heat.data_mut()[i] = v;
    }
    FrameOutput {
        heatmap: heat,
        size: Tensor::full(&[2, h, w], 2.0),
        embedding: Tensor::full(&[h * w, 4], 0.5),
    }
}

fn shift_right(grid: Grid) -> TransitionMatrix {
    let m = grid.nodes();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        let (r, c) = grid.coords(i);
        data[i * m + grid.index(r, (c + 1).min(grid.w - 1))] = 1.0;
    }
    TransitionMatrix::dense(m, data).unwrap()
}

fn criterion_algorithms() -> String {
    let cfg = TrackerConfig::default();

    // init and update
    let mut s = TrackerSession::new(&ModelConfig::default(), (6, 8), cfg.clone()).unwrap();
    let r0 = s.step(&frame_output(6, 8, &[(2 * 8 + 3, 0.9)])).unwrap();
    assert_eq!(r0.records.len(), 1);
    assert_eq!((r0.records[0].id, r0.records[0].visible), (1, true));
    assert_eq!(r0.records[0].bbox, BBox::new(2.5, 1.5, 2.0, 2.0));
    let r1 = s.step(&frame_output(6, 8, &[(2 * 8 + 4, 0.8)])).unwrap();
    assert_eq!(r1.records.len(), 1);
    assert_eq!((r1.records[0].id, r1.records[0].visible), (1, true));
    assert_eq!(r1.records[0].bbox, BBox::new(3.5, 1.5, 2.0, 2.0));
    assert!(s.tracks()[0].was_moving);

    let layout = Layout {
        grid: Grid::new(3, 8),
        node_scale: 1.0,
    };
    // terminate by confidence: a flat belief over 24 cells peaks at 1/24
    let flat = TransitionMatrix::dense(24, vec![1.0 / 24.0; 24 * 24]).unwrap();
    let mut t = Track::new(1, 0, &det(2.5, 1.5, 0.9));
    assert_eq!(
        occluded_step(&mut t, &flat, layout, &[], &mut [], &cfg),
        OccludedOutcome::Terminated(Termination::LowConfidence)
    );
    // hypothesis steps right, then hits the border column
    let shift = shift_right(layout.grid);
    let mut t = Track::new(1, 0, &det(4.5, 1.5, 0.9));
    for k in 1..=2 {
        let out = occluded_step(&mut t, &shift, layout, &[], &mut [], &cfg);
        assert_eq!(out, OccludedOutcome::Hypothesized(layout.grid.index(1, 4 + k)));
        assert_eq!(t.center, (4.5 + k as f64, 1.5));
    }
    assert_eq!(
        occluded_step(&mut t, &shift, layout, &[], &mut [], &cfg),
        OccludedOutcome::Terminated(Termination::Boundary)
    );
    // re-match: the detection one cell from the hypothesis is claimed
    let mut t = Track::new(1, 0, &det(2.5, 1.5, 0.9));
    let dets = [det(6.5, 1.5, 0.95), det(3.5, 1.5, 0.4)];
    let mut available = [true, true];
    assert_eq!(
        occluded_step(&mut t, &shift, layout, &dets, &mut available, &cfg),
        OccludedOutcome::Rematched(1)
    );
    assert_eq!(available, [true, false]);

    // box branches
    let start = det(4.0, 4.0, 0.9);
    let mut t = Track::new(1, 0, &start);
    assert_eq!(predict_box(&t, &[], &cfg), start.bbox, "visible");
    t.walker = Some(vec![]);
    t.is_static = true;
    assert_eq!(predict_box(&t, &[], &cfg), start.bbox, "static");
    t.was_moving = true;
    t.center = (7.0, 4.0);
    assert_eq!(predict_box(&t, &[], &cfg), BBox::new(6.0, 3.0, 2.0, 2.0), "moving");
    t.was_moving = false;
    t.is_static = false;
    let container = BBox::new(5.0, 2.0, 4.0, 4.0);
    // inside the container, bottom-aligned: y center 4 + (4 - 2) / 2
    assert_eq!(
        predict_box(&t, &[container], &cfg),
        BBox::new(6.0, 4.0, 2.0, 2.0),
        "static then moving"
    );
    let a = BBox::centered(3.0, 5.0, 4.0, 4.0);
    let b = BBox::centered(7.0, 5.0, 4.0, 4.0);
    let last = BBox::new(0.0, 0.0, 2.0, 2.0);
    assert_eq!(refine_box((5.0, 5.0), &last, &[a, b], RefineOffset::Inside).center(), (3.0, 6.0));
    assert_eq!(refine_box((5.0, 5.0), &last, &[b, a], RefineOffset::Inside).center(), (7.0, 6.0));
    assert_eq!(refine_box((6.5, 5.0), &last, &[a, b], RefineOffset::Inside).center(), (7.0, 6.0));
    "init, update, low-confidence, boundary, re-match; visible, moving, static, static-then-moving, tie-break".into()
}

// ---------------------------------------------------------------- 6

fn criterion_emergence() -> String {
    let start = Instant::now();
    let world = ScenarioConfig::pass_behind();
    let train_set = generate_many(&world, 0, TRAIN_SEQUENCES).unwrap();
    let held_out = generate_many(&world, HELD_OUT_SEED, HELD_OUT).unwrap();
    let mc = smoke_model();
    let ram = train(&train_set, &mc, &smoke_train(LossWeights::default(), world.length)).unwrap();
    let no_walk = LossWeights {
        lambda_ram: 0.0,
        lambda_over: 0.0,
        ..LossWeights::default()
    };
    let plain = train(&train_set, &mc, &smoke_train(no_walk, world.length)).unwrap();

    let rate = |model: &Model, policy: WalkPolicy| {
        let cfg = TrackerConfig {
            policy,
            ..TrackerConfig::default()
        };
        let preds: Vec<Vec<TrackRecord>> = held_out
            .iter()
            .map(|s| track_sequence(model, s, &cfg).unwrap().records)
            .collect();
        let r = evaluate_dataset(&preds, &held_out).unwrap();
        assert!(r.episodes > 0);
        r.recovery_rate().unwrap()
    };
    let learned = rate(&ram.model, WalkPolicy::Learned);
    let frozen = rate(&ram.model, WalkPolicy::MemorizeLast);
    let ablated = rate(&plain.model, WalkPolicy::Learned);
    let took = start.elapsed();
    let summary = format!(
        "recovery RAM {:.1}%, memorize-last {:.1}%, no-walk-loss {:.1}%, {:.0}s",
        100.0 * learned,
        100.0 * frozen,
        100.0 * ablated,
        took.as_secs_f64()
    );
    assert!(learned > ablated, "{summary}");
    assert!(learned - frozen >= RECOVERY_MARGIN, "{summary}");
    assert!(took < EMERGENCE_BUDGET, "{summary}");
    summary
}

// ---------------------------------------------------------------- 7

/// Per held-out sequence: the hidden run of the target, the track that held
/// it just before, and that track's final hypothesized center.
fn carried_end(seq: &SceneSequence, preds: &[TrackRecord]) -> Option<((f64, f64), (f64, f64), Option<(f64, f64)>)> {
    let tr = &seq.tracks[0];
    let vis = |t: usize| tr.visible_at(t).is_some();
    let start = (1..seq.len()).find(|&t| !vis(t) && vis(t - 1))?;
    let mut end = start;
    while end + 1 < seq.len() && !vis(end + 1) {
        end += 1;
    }
    if !tr.entries[start..=end]
        .iter()
        .any(|e| e.as_ref().is_some_and(|e| e.state == VisibilityState::Carried))
    {
        return None;
    }
    let entry = tr.visible_at(start - 1).unwrap();
    let id = preds
        .iter()
        .filter(|r| r.frame == start - 1)
        .max_by(|a, b| iou(&a.bbox, &entry.bbox).total_cmp(&iou(&b.bbox, &entry.bbox)))
        .map(|r| r.id);
    let hyp = id.and_then(|id| {
        preds
            .iter()
            .find(|r| r.frame == end && r.id == id && !r.visible)
            .map(|r| r.bbox.center())
    });
    let gt = tr.entries[end].as_ref().unwrap().center;
    Some((entry.center, gt, hyp))
}

fn l1(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

fn criterion_carrying() -> String {
    let start = Instant::now();
    let world = ScenarioConfig::carrying();
    let train_set = generate_many(&world, 0, TRAIN_SEQUENCES).unwrap();
    let held_out = generate_many(&world, HELD_OUT_SEED, HELD_OUT).unwrap();
    let ram = train(&train_set, &smoke_model(), &smoke_train(LossWeights::default(), world.length)).unwrap();

    let ends = |policy: WalkPolicy| {
        let cfg = TrackerConfig {
            policy,
            ..TrackerConfig::default()
        };
        held_out
            .iter()
            .filter_map(|s| carried_end(s, &track_sequence(&ram.model, s, &cfg).unwrap().records))
            .collect::<Vec<_>>()
    };
    let learned = ends(WalkPolicy::Learned);
    let frozen = ends(WalkPolicy::MemorizeLast);
    let n = learned.len();
    assert!(n > 0, "no carrying episodes");
    let hits = learned
        .iter()
        .filter(|(_, gt, hyp)| hyp.is_some_and(|h| l1(h, *gt) <= CARRY_L1))
        .count();
    let frozen_hits = frozen
        .iter()
        .filter(|(_, gt, hyp)| hyp.is_some_and(|h| l1(h, *gt) <= CARRY_L1))
        .count();
    // the frozen walker keeps the entry cell: within half a cell per axis
    for (entry, _, hyp) in &frozen {
        if let Some(h) = hyp {
            assert!(l1(*h, *entry) <= 1.0, "memorize-last moved from {entry:?} to {h:?}");
        }
    }
    let summary = format!(
        "final hypothesis within L1 {CARRY_L1} on {hits}/{n} episodes, memorize-last {frozen_hits}/{n}, {:.0}s",
        start.elapsed().as_secs_f64()
    );
    assert!(hits as f64 >= CARRY_RATE * n as f64, "{summary}");
    summary
}

// ---------------------------------------------------------------- 8

fn labeled(boxes: &[(BBox, VisibilityState)]) -> ObjectTrack {
    ObjectTrack {
        object_id: 0,
        entries: boxes
            .iter()
            .map(|&(bbox, state)| {
                Some(TrackEntry {
                    center: bbox.center(),
                    bbox,
                    state,
                })
            })
            .collect(),
    }
}

fn fixture_sequence(tracks: Vec<ObjectTrack>) -> SceneSequence {
    let len = tracks[0].entries.len();
    SceneSequence {
        frames: vec![Tensor::zeros(&[4, 16, 16]); len],
        tracks,
        props: vec![],
        seed: 0,
        config: ScenarioConfig::default(),
    }
}

fn rec(frame: usize, id: u32, bbox: BBox, visible: bool) -> TrackRecord {
    TrackRecord {
        frame,
        id,
        bbox,
        confidence: 1.0,
        visible,
    }
}

fn criterion_metrics() -> String {
    use VisibilityState::*;
    assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(0.0, 0.0, 1.0, 1.0)), 1.0);
    assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(3.0, 0.0, 1.0, 1.0)), 0.0);
    assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(0.5, 0.0, 1.0, 1.0)), 0.5 / 1.5);

    // sequence 0: hidden behind a wall for two frames, same id throughout
    let g0 = BBox::new(4.0, 4.0, 2.0, 2.0);
    let s0 = fixture_sequence(vec![labeled(&[(g0, Visible), (g0, Occluded), (g0, Occluded), (g0, Visible)])]);
    let p0 = vec![
        rec(0, 1, g0, true),
        rec(1, 1, BBox::new(4.0, 4.0, 2.0, 1.0), false),
        rec(2, 1, BBox::new(4.0, 4.0, 1.0, 1.0), false),
        rec(3, 1, g0, true),
    ];
    // sequence 1: contained then carried; the track is lost and a new id
    // picks the target up
    let g1 = BBox::new(2.0, 2.0, 2.0, 2.0);
    let s1 = fixture_sequence(vec![labeled(&[(g1, Visible), (g1, Contained), (g1, Carried), (g1, Visible)])]);
    let p1 = vec![
        rec(0, 3, g1, true),
        rec(1, 3, BBox::new(2.0, 2.0, 4.0, 2.0), false),
        rec(3, 4, g1, true),
    ];
    // sequence 2: two visible objects and a spurious track
    let (ga, gb) = (BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(8.0, 8.0, 2.0, 2.0));
    let mut second = labeled(&[(gb, Visible), (gb, Visible)]);
    second.object_id = 1;
    let s2 = fixture_sequence(vec![labeled(&[(ga, Visible), (ga, Visible)]), second]);
    let p2 = vec![
        rec(0, 7, gb, true),
        rec(1, 7, gb, true),
        rec(0, 8, BBox::new(0.0, 0.0, 1.0, 1.0), true),
        rec(1, 8, BBox::new(0.0, 0.0, 2.0, 1.0), true),
        rec(0, 9, BBox::new(12.0, 0.0, 2.0, 2.0), true),
    ];

    let r = evaluate_dataset(&[p0, p1, p2], &[s0, s1, s2]).unwrap();
    // visible IoUs: 1, 1 | 1, 0 | 0.25, 0.5, 1, 1
    assert_eq!(r.states[Visible.index()].frames, 8);
    assert_eq!(r.mean_iou(Visible), Some(5.75 / 8.0));
    assert_eq!(r.map(Visible), Some(7.0 / 8.0));
    assert_eq!(r.mean_iou(Occluded), Some(0.75 / 2.0));
    assert_eq!(r.map(Occluded), Some(1.0));
    assert_eq!(r.mean_iou(Contained), Some(0.5));
    assert_eq!(r.map(Contained), Some(1.0));
    assert_eq!(r.mean_iou(Carried), Some(0.0));
    assert_eq!(r.map(Carried), Some(0.0));
    assert_eq!((r.episodes, r.recovered), (2, 1));
    assert_eq!(r.recovery_rate(), Some(0.5));
    assert_eq!(r.id_switches, 1);
    assert_eq!(r.sequences[2].assignment, vec![(0, 8), (1, 7)]);
    format!("{}", metrics::render_table(&r).lines().last().unwrap())
}

// ---------------------------------------------------------------- 9

const PIPELINE_CONFIG: &str = r#"
[generate]
count = 6

[model]
feat_channels = 4
mem_channels = 8
embed_channels = 4

[train]
epochs = 2
accumulate = 2

[viz]
limit = 1
"#;

fn run_pipeline(root: &Path, workers: usize) {
    let bin = env!("CARGO_BIN_EXE_ramwalk");
    let config = root.join("run.toml");
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    let dir = |s: &str| root.join(s);
    let data = dir("data").join("dataset.bin");
    let ckpt = dir("model").join("checkpoint.bin");
    let tracks = dir("tracks").join("tracks");
    let steps: Vec<Vec<String>> = vec![
        vec!["generate".into(), "--out".into(), dir("data").display().to_string()],
        vec!["train".into(), "--dataset".into(), data.display().to_string(), "--out".into(), dir("model").display().to_string()],
        vec![
            "track".into(),
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--dataset".into(),
            data.display().to_string(),
            "--out".into(),
            dir("tracks").display().to_string(),
        ],
        vec![
            "eval".into(),
            "--tracks".into(),
            tracks.display().to_string(),
            "--dataset".into(),
            data.display().to_string(),
            "--out".into(),
            dir("eval").display().to_string(),
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(&args)
            .args(["--config", &config.display().to_string(), "--seed", "17", "--workers", &workers.to_string()])
            .env("RAMWALK_LOG", "error")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn criterion_determinism() -> String {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), 1);
    run_pipeline(b.path(), 2);
    let mut files = vec![
        "data/dataset.bin".to_string(),
        "data/dataset_manifest.txt".into(),
        "model/checkpoint.bin".into(),
        "eval/report.txt".into(),
        "eval/report.jsonl".into(),
    ];
    files.extend((0..6).map(|i| format!("tracks/tracks/seq_{i:04}.txt")));
    let mut bytes = 0;
    for f in &files {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
        bytes += x.len();
    }
    // the epoch log is identical apart from its timing field
    let epochs = |root: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(root.join("model/metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v
            })
            .collect()
    };
    let log = epochs(a.path());
    assert!(!log.is_empty());
    assert_eq!(log, epochs(b.path()), "epoch log differs");
    format!(
        "{} files, {bytes} bytes identical across runs with 1 and 2 workers, epoch log equal up to timing",
        files.len()
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> String); 9] = [
        (1, "gradient suite", criterion_gradients),
        (2, "stochasticity", criterion_stochasticity),
        (3, "local/global equivalence", criterion_local_global),
        (4, "oracle matrix products", criterion_oracle_products),
        (5, "algorithmic fixtures", criterion_algorithms),
        (6, "emergence smoke test", criterion_emergence),
        (7, "carrying smoke test", criterion_carrying),
        (8, "metrics fixtures", criterion_metrics),
        (9, "determinism", criterion_determinism),
    ];
    // failures are reported on the criterion line, not as backtraces
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => println!("[PASS] {n} {name}: {detail}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("[FAIL] {n} {name}: {msg}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
