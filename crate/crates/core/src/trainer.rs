//! Optimization loop over redacted sequences.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Gradients, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{is_backbone, Bound, Model, ModelConfig};
use crate::walk::{
    self, local_graph, loss_overlap, loss_ram, loss_visible, one_hot, rollout_var, sigma_for,
    smoothing_mask, total_loss, Grid, Label, LossWeights, ObjectWalk, TransitionVar,
    VisibleObject,
};
use crate::worldgen::SceneSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub seq_len: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epochs: 2,
            seq_len: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over the dataset.
    pub iters_per_epoch: Option<usize>,
    /// Sequences are cropped to their first `seq_len` frames.
    pub seq_len: usize,
    /// Sequences whose gradients are averaged per step.
    pub accumulate: usize,
    pub seed: u64,
    /// Sample only sequences with at least one hidden frame in the crop.
    pub occlusion_only: bool,
    pub loss: LossWeights,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            epochs: 10,
            iters_per_epoch: None,
            seq_len: 16,
            accumulate: 1,
            seed: 0,
            occlusion_only: false,
            loss: LossWeights::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.seq_len < 2 || (self.finetune.enabled && self.finetune.seq_len < 2) {
            return Err(Error::Config("sequence length must be at least 2".into()));
        }
        if self.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

/// Adam moments for every parameter in a store.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of the parameters accepted by `trainable`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        cfg: &TrainConfig,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !trainable(store.name(id)) {
                continue;
            }
            let k = id.index();
            let g = grads.get(id).data();
            let p = store.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g[i] + cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// The loss terms of one sequence recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub visible: Var,
    pub ram: Option<Var>,
    pub over: Option<Var>,
    pub total: Var,
}

/// Loss values of one sequence or the mean over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub visible: f64,
    pub ram: f64,
    pub over: f64,
    pub total: f64,
}

impl LossParts {
    fn read(tape: &Tape, v: &LossVars) -> Self {
        let get = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        Self {
            visible: tape.value(v.visible).item(),
            ram: get(v.ram),
            over: get(v.over),
            total: tape.value(v.total).item(),
        }
    }

    fn add(&mut self, o: &LossParts) {
        self.visible += o.visible;
        self.ram += o.ram;
        self.over += o.over;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.visible *= f;
        self.ram *= f;
        self.over *= f;
        self.total *= f;
        self
    }
}

/// Records the full objective for the first `len` frames of `seq`.
///
/// Only entries labeled visible are read; hidden or redacted frames are
/// supervised solely through the walk.
pub fn objective(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    seq: &SceneSequence,
    len: usize,
    weights: &LossWeights,
) -> Result<LossVars> {
    let len = len.min(seq.len());
    let frames = &seq.frames[..len];
    let outs = model.rollout(tape, bound, frames)?;
    let cfg = model.config();
    let (h, w) = seq.frame_size();
    let (mh, mw) = cfg.memory_size(h, w);
    let heat_grid = Grid::new(mh, mw);
    let hs = cfg.heat_scale();

    let mut visible = tape.constant(Tensor::scalar(0.0));
    for (t, out) in outs.iter().enumerate() {
        let objects: Vec<VisibleObject> = seq
            .tracks
            .iter()
            .filter_map(|tr| tr.visible_at(t))
            .map(|e| VisibleObject {
                cell: heat_grid.cell_of(e.center.0, e.center.1, hs),
                size: (e.bbox.w, e.bbox.h),
                sigma: sigma_for(e.bbox.w / hs, e.bbox.h / hs, weights.min_overlap),
            })
            .collect();
        let l = loss_visible(tape, out.heatmap, out.size, &objects, weights)?;
        visible = tape.add(visible, l)?;
    }
    let visible = tape.scale(visible, 1.0 / len.max(1) as f64);

    let (ram, over) = if weights.uses_walk() && len >= 2 {
        let (gh, gw) = cfg.node_grid(h, w);
        let grid = Grid::new(gh, gw);
        let graph = weights
            .radius(grid)
            .map(|r| local_graph(grid, r))
            .transpose()?;
        let transitions = outs
            .windows(2)
            .map(|p| TransitionVar::build(tape, p[0].embedding, p[1].embedding, weights.tau, graph.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let ns = cfg.node_scale();
        let mut walks = Vec::with_capacity(seq.tracks.len());
        for track in &seq.tracks {
            let labels: Vec<Option<Label>> = (0..len)
                .map(|t| {
                    track.visible_at(t).map(|e| {
                        let cell = grid.cell_of(e.center.0, e.center.1, ns);
                        let sigma = sigma_for(e.bbox.w / ns, e.bbox.h / ns, weights.min_overlap);
                        Label {
                            cell,
                            mask: smoothing_mask(grid, cell, sigma),
                        }
                    })
                })
                .collect();
            let Some(start) = labels.iter().position(Option::is_some) else {
                continue;
            };
            let x0 = one_hot(grid.nodes(), labels[start].as_ref().expect("start").cell);
            let x0 = tape.constant(Tensor::new(&[grid.nodes()], x0)?);
            let states = rollout_var(tape, x0, &transitions[start..])?;
            let mut padded = vec![None; start];
            padded.extend(states.into_iter().map(Some));
            walks.push(ObjectWalk {
                states: padded,
                labels,
            });
        }
        (
            Some(loss_ram(tape, &walks, weights)?),
            Some(loss_overlap(tape, &walks)?),
        )
    } else {
        (None, None)
    };
    let total = total_loss(tape, visible, ram, over, weights)?;
    Ok(LossVars {
        visible,
        ram,
        over,
        total,
    })
}

/// Loss values and parameter gradients for one sequence.
pub fn sequence_gradients(
    model: &Model,
    seq: &SceneSequence,
    len: usize,
    weights: &LossWeights,
    trainable: impl Fn(&str) -> bool,
) -> Result<(LossParts, Gradients)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let vars = objective(model, &mut tape, &bound, seq, len, weights)?;
    let parts = LossParts::read(&tape, &vars);
    if !parts.total.is_finite() {
        return Err(Error::NonFinite { seed: seq.seed });
    }
    let grads = tape.backward(vars.total)?.param_grads(&tape, model.params());
    if !grads.is_finite() {
        return Err(Error::NonFinite { seed: seq.seed });
    }
    Ok((parts, grads))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub loss_vis: f64,
    pub loss_ram: f64,
    pub loss_over: f64,
    pub loss_total: f64,
    pub wall_time: f64,
}

/// Per-step hook; receives the step index and the step's mean losses.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &LossParts);

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

fn crop_has_hidden(seq: &SceneSequence, len: usize) -> bool {
    seq.tracks.iter().any(|t| {
        t.entries
            .iter()
            .take(len)
            .any(|e| e.is_none_or(|e| e.state != crate::worldgen::VisibilityState::Visible))
    })
}

/// Indices of the sequences eligible for sampling.
pub fn sample_pool(dataset: &[SceneSequence], len: usize, occlusion_only: bool) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| !occlusion_only || crop_has_hidden(&dataset[i], len))
        .collect()
}

struct Phase<'a> {
    name: &'static str,
    epochs: usize,
    len: usize,
    trainable: &'a (dyn Fn(&str) -> bool + Sync),
}

fn run_phase(
    model: &mut Model,
    dataset: &[SceneSequence],
    cfg: &TrainConfig,
    phase: &Phase<'_>,
    rng: &mut ChaCha8Rng,
    mut hook: Option<StepHook<'_>>,
) -> Result<Vec<EpochRecord>> {
    let redacted: Vec<SceneSequence> = dataset.iter().map(SceneSequence::redacted).collect();
    let pool = sample_pool(&redacted, phase.len, cfg.occlusion_only);
    if pool.is_empty() {
        return Err(Error::invalid(
            "train",
            "no training sequences after filtering".to_string(),
        ));
    }
    let mut adam = Adam::new(model.params());
    let mut log = Vec::with_capacity(phase.epochs);
    let steps = cfg
        .iters_per_epoch
        .unwrap_or(pool.len().div_ceil(cfg.accumulate));
    let mut global = 0usize;
    for epoch in 0..phase.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = Vec::new();
        let mut sum = LossParts::default();
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(cfg.accumulate);
            while batch.len() < cfg.accumulate {
                if order.is_empty() {
                    order = pool.clone();
                    order.shuffle(rng);
                    order.reverse();
                }
                batch.push(order.pop().expect("refilled"));
            }
            let snapshot: &Model = model;
            let results: Vec<Result<(LossParts, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    sequence_gradients(snapshot, &redacted[i], phase.len, &cfg.loss, phase.trainable)
                })
                .collect();
            let mut grads = Gradients::zeros_like(model.params());
            let mut parts = LossParts::default();
            for r in results {
                let (p, g) = r?;
                parts.add(&p);
                grads.merge(&g)?;
            }
            let k = 1.0 / batch.len() as f64;
            grads.scale(k);
            let parts = parts.scaled(k);
            if let Some(c) = cfg.grad_clip {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            adam.update(model.params_mut(), &grads, cfg, phase.trainable);
            sum.add(&parts);
            if let Some(h) = hook.as_mut() {
                h(global, &parts);
            }
            global += 1;
        }
        let mean = sum.scaled(1.0 / steps.max(1) as f64);
        let record = EpochRecord {
            phase: phase.name.to_string(),
            epoch,
            steps,
            loss_vis: mean.visible,
            loss_ram: mean.ram,
            loss_over: mean.over,
            loss_total: mean.total,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: vis {:.4} ram {:.4} over {:.4} total {:.4} ({:.1}s)",
            phase.name,
            record.loss_vis,
            record.loss_ram,
            record.loss_over,
            record.loss_total,
            record.wall_time
        );
        log.push(record);
    }
    Ok(log)
}

/// Trains a fresh model on `dataset`, followed by the frozen-backbone phase
/// when enabled. Deterministic given the configs.
pub fn train(
    dataset: &[SceneSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_hook(dataset, model_cfg, cfg, None)
}

pub fn train_with_hook(
    dataset: &[SceneSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    hook: Option<StepHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train", "dataset is empty".to_string()));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all = |_: &str| true;
    let mut log = run_phase(
        &mut model,
        dataset,
        cfg,
        &Phase {
            name: "main",
            epochs: cfg.epochs,
            len: cfg.seq_len,
            trainable: &all,
        },
        &mut rng,
        hook,
    )?;
    if cfg.finetune.enabled {
        log.extend(finetune_phase(&mut model, dataset, cfg, &mut rng)?);
    }
    Ok(TrainOutcome { model, log })
}

fn finetune_phase(
    model: &mut Model,
    dataset: &[SceneSequence],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let heads = |n: &str| !is_backbone(n);
    run_phase(
        model,
        dataset,
        cfg,
        &Phase {
            name: "finetune",
            epochs: cfg.finetune.epochs,
            len: cfg.finetune.seq_len,
            trainable: &heads,
        },
        rng,
        None,
    )
}

/// Continues training `model` with the encoder and memory frozen, on
/// sequences of `cfg.finetune.seq_len` frames and a fresh optimizer.
pub fn freeze_finetune(
    model: &Model,
    dataset: &[SceneSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("freeze_finetune", "dataset is empty".to_string()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f12e);
    let log = finetune_phase(&mut model, dataset, cfg, &mut rng)?;
    Ok(TrainOutcome { model, log })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    diffcore::save_checkpoint(path, model.params())
}

/// Loads parameters into a model built from `config`; any difference in
/// names or shapes is a manifest error.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Model> {
    let loaded = diffcore::load_checkpoint(path)?;
    let mut model = Model::new(config.clone())?;
    diffcore::restore_into(model.params_mut(), &loaded)?;
    Ok(model)
}

/// Writes one JSON object per line.
pub fn write_metrics_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in log {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Corrupt(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    crate::io::write_atomic(path, &buf)
}

/// Walk rollouts never leave the simplex; exposed for diagnostics.
pub fn walker_mass(model: &Model, seq: &SceneSequence, len: usize, weights: &LossWeights) -> Result<Vec<f64>> {
    let len = len.min(seq.len());
    let outs = model.infer(&seq.frames[..len])?;
    let (h, w) = seq.frame_size();
    let (gh, gw) = model.config().node_grid(h, w);
    let grid = Grid::new(gh, gw);
    let graph = weights.radius(grid).map(|r| local_graph(grid, r)).transpose()?;
    let mut x = one_hot(grid.nodes(), 0);
    let mut out = vec![1.0];
    for p in outs.windows(2) {
        let a = match &graph {
            Some(g) => walk::affinity_on(&p[0].embedding, &p[1].embedding, weights.tau, g)?,
            None => walk::affinity_global(&p[0].embedding, &p[1].embedding, weights.tau)?,
        };
        x = a.step(&x);
        out.push(x.iter().sum());
    }
    Ok(out)
}
