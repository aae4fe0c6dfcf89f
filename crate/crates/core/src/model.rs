//! Frame encoder, ConvGRU spatial memory, and the heads read off the memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Channel plan and spatial factors of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub mem_channels: usize,
    pub embed_channels: usize,
    /// Encoder downsampling factor (1 or 2).
    pub stride: usize,
    /// Max-pool kernel in front of the embedding head (1 disables pooling).
    pub pool: usize,
    /// Initial bias of the ConvGRU update gate.
    pub update_gate_bias: f64,
    /// Initial bias of the center heatmap logit.
    pub heatmap_bias: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            feat_channels: 16,
            mem_channels: 32,
            embed_channels: 16,
            stride: 1,
            pool: 1,
            update_gate_bias: -1.0,
            heatmap_bias: -2.19,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.pool == 0 {
            return Err(Error::Config("stride and pool must be positive".into()));
        }
        if [
            self.in_channels,
            self.feat_channels,
            self.mem_channels,
            self.embed_channels,
        ]
        .contains(&0)
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the memory and heatmaps for `h x w` frames.
    pub fn memory_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Spatial size of the walk graph for `h x w` frames.
    pub fn node_grid(&self, h: usize, w: usize) -> (usize, usize) {
        let (mh, mw) = self.memory_size(h, w);
        (mh.div_ceil(self.pool), mw.div_ceil(self.pool))
    }

    /// Frame pixels per heatmap cell along each axis.
    pub fn heat_scale(&self) -> f64 {
        self.stride as f64
    }

    /// Frame pixels per walk-graph node along each axis.
    pub fn node_scale(&self) -> f64 {
        (self.stride * self.pool) as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layers {
    enc1: Conv,
    enc2: Conv,
    gru_z: Conv,
    gru_r: Conv,
    gru_h: Conv,
    head_p: Conv,
    head_size: Conv,
    embed1: Conv,
    embed2: Conv,
}

/// Parameter names in manifest order. Stable across versions.
pub const PARAM_NAMES: [&str; 18] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "gru.update.weight",
    "gru.update.bias",
    "gru.reset.weight",
    "gru.reset.bias",
    "gru.candidate.weight",
    "gru.candidate.bias",
    "head.center.weight",
    "head.center.bias",
    "head.size.weight",
    "head.size.bias",
    "head.embed1.weight",
    "head.embed1.bias",
    "head.embed2.weight",
    "head.embed2.bias",
];

/// Whether a parameter belongs to the backbone (encoder and memory).
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("gru.")
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Layers,
}

/// Parameters recorded on a particular tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn w(&self, c: Conv) -> Var {
        self.vars[c.w.index()]
    }

    fn b(&self, c: Conv) -> Var {
        self.vars[c.b.index()]
    }
}

/// Per-frame outputs of a memory rollout.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub memory: Var,
    /// `[H', W']` center heatmap in `[0, 1]`.
    pub heatmap: Var,
    /// `[2, H', W']` box width and height in pixels.
    pub size: Var,
    /// `[m, D_q]` unit-norm node embeddings, `m = H'' * W''` in row-major order.
    pub embedding: Var,
}

/// Plain-value outputs for one frame, produced at inference time.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub heatmap: Tensor,
    pub size: Tensor,
    pub embedding: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (c, f, d, q) = (
            config.in_channels,
            config.feat_channels,
            config.mem_channels,
            config.embed_channels,
        );
        let mut conv = |name: &str, k: usize, cin: usize, ksz: usize, bias: f64| {
            let fan_in = (cin * ksz * ksz) as f64;
            let a = (1.0 / fan_in).sqrt();
            let w = Tensor::from_fn(&[k, cin, ksz, ksz], |_| rng.gen_range(-a..a));
            let w = params.insert(&format!("{name}.weight"), w);
            let b = params.insert(&format!("{name}.bias"), Tensor::full(&[k], bias));
            Conv { w, b }
        };
        let layers = Layers {
            enc1: conv("encoder.conv1", f, c, 3, 0.0),
            enc2: conv("encoder.conv2", f, f, 3, 0.0),
            gru_z: conv("gru.update", d, f + d, 3, config.update_gate_bias),
            gru_r: conv("gru.reset", d, f + d, 3, 0.0),
            gru_h: conv("gru.candidate", d, f + d, 3, 0.0),
            head_p: conv("head.center", 1, d, 1, config.heatmap_bias),
            head_size: conv("head.size", 2, d, 1, 0.0),
            embed1: conv("head.embed1", q, d, 1, 0.0),
            embed2: conv("head.embed2", q, q, 1, 0.0),
        };
        debug_assert!(params.iter().map(|(n, _)| n).eq(PARAM_NAMES));
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records every parameter on `tape`; those rejected by `trainable` are
    /// recorded as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .ids()
            .map(|id| {
                if trainable(self.params.name(id)) {
                    tape.param(&self.params, id)
                } else {
                    tape.constant(self.params.get(id).clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn conv(&self, tape: &mut Tape, b: &Bound, c: Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, b.w(c), b.b(c))
    }

    /// `[C,H,W] -> [D_f, H', W']`: two 3x3 conv+relu layers then stride downsampling.
    pub fn encode_frame(&self, tape: &mut Tape, b: &Bound, frame: Var) -> Result<Var> {
        let x = self.conv(tape, b, self.layers.enc1, frame)?;
        let x = tape.relu(x);
        let x = self.conv(tape, b, self.layers.enc2, x)?;
        let x = tape.relu(x);
        if self.config.stride > 1 {
            tape.maxpool2d(x, self.config.stride, self.config.stride)
        } else {
            Ok(x)
        }
    }

    /// One ConvGRU update of the memory from encoded features.
    pub fn gru_step(&self, tape: &mut Tape, b: &Bound, feat: Var, mem: Var) -> Result<Var> {
        let (sf, sm) = (tape.shape(feat), tape.shape(mem));
        if sf.len() != 3 || sm.len() != 3 || sf[1..] != sm[1..] {
            return Err(Error::shape("gru_step", sf, sm));
        }
        let fm = tape.concat(&[feat, mem])?;
        let z = self.conv(tape, b, self.layers.gru_z, fm)?;
        let z = tape.sigmoid(z);
        let r = self.conv(tape, b, self.layers.gru_r, fm)?;
        let r = tape.sigmoid(r);
        let rm = tape.mul(r, mem)?;
        let frm = tape.concat(&[feat, rm])?;
        let cand = self.conv(tape, b, self.layers.gru_h, frm)?;
        let cand = tape.tanh(cand);
        let keep = tape.affine(z, -1.0, 1.0);
        let kept = tape.mul(keep, mem)?;
        let fresh = tape.mul(z, cand)?;
        tape.add(kept, fresh)
    }

    pub fn project_centers(&self, tape: &mut Tape, b: &Bound, mem: Var) -> Result<Var> {
        let logits = self.conv(tape, b, self.layers.head_p, mem)?;
        let p = tape.sigmoid(logits);
        let (h, w) = (tape.shape(p)[1], tape.shape(p)[2]);
        tape.reshape(p, &[h, w])
    }

    pub fn predict_size(&self, tape: &mut Tape, b: &Bound, mem: Var) -> Result<Var> {
        self.conv(tape, b, self.layers.head_size, mem)
    }

    /// Node embeddings `[H''*W'', D_q]`, each row unit-norm (or zero).
    pub fn embed_nodes(&self, tape: &mut Tape, b: &Bound, mem: Var) -> Result<Var> {
        let x = if self.config.pool > 1 {
            tape.maxpool2d(mem, self.config.pool, self.config.pool)?
        } else {
            mem
        };
        let x = self.conv(tape, b, self.layers.embed1, x)?;
        let x = tape.relu(x);
        let x = self.conv(tape, b, self.layers.embed2, x)?;
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1] * s[2]])?;
        let x = tape.transpose(x)?;
        tape.l2_normalize_rows(x)
    }

    pub fn initial_memory(&self, tape: &mut Tape, h: usize, w: usize) -> Var {
        let (mh, mw) = self.config.memory_size(h, w);
        tape.constant(Tensor::zeros(&[self.config.mem_channels, mh, mw]))
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(Error::shape(
                "model input",
                s,
                &[self.config.in_channels, 0, 0],
            ));
        }
        Ok(())
    }

    /// Full differentiable rollout over `frames` starting from zero memory.
    pub fn rollout(&self, tape: &mut Tape, b: &Bound, frames: &[Tensor]) -> Result<Vec<FrameVars>> {
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        self.check_frame(first)?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut mem = self.initial_memory(tape, h, w);
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            self.check_frame(f)?;
            let x = tape.constant(f.clone());
            let feat = self.encode_frame(tape, b, x)?;
            mem = self.gru_step(tape, b, feat, mem)?;
            out.push(FrameVars {
                memory: mem,
                heatmap: self.project_centers(tape, b, mem)?,
                size: self.predict_size(tape, b, mem)?,
                embedding: self.embed_nodes(tape, b, mem)?,
            });
        }
        Ok(out)
    }

    /// Non-differentiable rollout. Uses one short tape per frame so memory
    /// use stays flat on long sequences.
    pub fn infer(&self, frames: &[Tensor]) -> Result<Vec<FrameOutput>> {
        let mut out = Vec::with_capacity(frames.len());
        let mut mem: Option<Tensor> = None;
        for f in frames {
            self.check_frame(f)?;
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, |_| false);
            let m = match &mem {
                Some(m) => tape.constant(m.clone()),
                None => self.initial_memory(&mut tape, f.shape()[1], f.shape()[2]),
            };
            let x = tape.constant(f.clone());
            let feat = self.encode_frame(&mut tape, &b, x)?;
            let m = self.gru_step(&mut tape, &b, feat, m)?;
            let heat = self.project_centers(&mut tape, &b, m)?;
            let size = self.predict_size(&mut tape, &b, m)?;
            let emb = self.embed_nodes(&mut tape, &b, m)?;
            out.push(FrameOutput {
                heatmap: tape.value(heat).clone(),
                size: tape.value(size).clone(),
                embedding: tape.value(emb).clone(),
            });
            mem = Some(tape.value(m).clone());
        }
        Ok(out)
    }

    /// Memory states only; used for convergence diagnostics.
    pub fn memories(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(frames.len());
        for f in frames {
            self.check_frame(f)?;
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, |_| false);
            let m = match out.last() {
                Some(m) => tape.constant(m.clone()),
                None => self.initial_memory(&mut tape, f.shape()[1], f.shape()[2]),
            };
            let x = tape.constant(f.clone());
            let feat = self.encode_frame(&mut tape, &b, x)?;
            let m = self.gru_step(&mut tape, &b, feat, m)?;
            out.push(tape.value(m).clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::testutil::{gradcheck, weighted_sum};

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            feat_channels: 2,
            mem_channels: 3,
            embed_channels: 2,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn set(model: &mut Model, name: &str, value: f64) {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(value);
    }

    #[test]
    fn parameter_manifest_is_stable() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let names: Vec<&str> = m.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names, PARAM_NAMES);
        assert_eq!(
            m.params().by_name("gru.update.weight").unwrap().shape(),
            &[32, 48, 3, 3]
        );
        assert_eq!(m.params().by_name("head.embed2.weight").unwrap().shape(), &[16, 16, 1, 1]);
    }

    #[test]
    fn zero_frame_with_zero_bias_encodes_to_zero() {
        let mut m = Model::new(tiny()).unwrap();
        set(&mut m, "encoder.conv1.bias", 0.0);
        set(&mut m, "encoder.conv2.bias", 0.0);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::zeros(&[1, 5, 7]));
        let f = m.encode_frame(&mut tape, &b, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_output_is_ceil_divided() {
        for (stride, want) in [(1, [5, 7]), (2, [3, 4])] {
            let m = Model::new(ModelConfig { stride, ..tiny() }).unwrap();
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, |_| true);
            let x = tape.constant(Tensor::full(&[1, 5, 7], 0.5));
            let f = m.encode_frame(&mut tape, &b, x).unwrap();
            assert_eq!(&tape.value(f).shape()[1..], &want);
            assert_eq!(m.config().memory_size(5, 7), (want[0], want[1]));
        }
    }

    #[test]
    fn closed_update_gate_keeps_memory() {
        let mut m = Model::new(tiny()).unwrap();
        set(&mut m, "gru.update.weight", 0.0);
        set(&mut m, "gru.update.bias", -1e3);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let feat = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.3).sin()));
        let prev = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.7).cos() * 0.9);
        let mem = tape.constant(prev.clone());
        let next = m.gru_step(&mut tape, &b, feat, mem).unwrap();
        assert_eq!(tape.value(next), &prev);
    }

    #[test]
    fn open_update_gate_ignores_previous_memory() {
        let mut m = Model::new(tiny()).unwrap();
        set(&mut m, "gru.update.weight", 0.0);
        set(&mut m, "gru.update.bias", 1e3);
        // candidate must not read the memory either
        set(&mut m, "gru.reset.weight", 0.0);
        set(&mut m, "gru.reset.bias", -1e3);
        let feat = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.3).sin());
        let run = |prev: Tensor| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, |_| true);
            let f = tape.constant(feat.clone());
            let mem = tape.constant(prev);
            let next = m.gru_step(&mut tape, &b, f, mem).unwrap();
            tape.value(next).clone()
        };
        let a = run(Tensor::full(&[3, 4, 4], 0.5));
        let c = run(Tensor::full(&[3, 4, 4], -0.3));
        assert_eq!(a, c);
    }

    #[test]
    fn gru_dim_mismatch_is_an_error() {
        let m = Model::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let f = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let mem = tape.constant(Tensor::zeros(&[3, 4, 5]));
        assert!(m.gru_step(&mut tape, &b, f, mem).is_err());
    }

    #[test]
    fn zero_center_head_gives_half() {
        let mut m = Model::new(tiny()).unwrap();
        set(&mut m, "head.center.weight", 0.0);
        set(&mut m, "head.center.bias", 0.0);
        let out = m.infer(&[Tensor::full(&[1, 4, 6], 1.0)]).unwrap();
        assert_eq!(out[0].heatmap.shape(), &[4, 6]);
        assert!(out[0].heatmap.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn embeddings_are_unit_or_zero() {
        for pool in [1, 3] {
            let m = Model::new(ModelConfig { pool, ..ModelConfig::default() }).unwrap();
            let frames: Vec<Tensor> = (0..3)
                .map(|t| Tensor::from_fn(&[4, 9, 9], |i| ((i + t) as f64 * 0.13).sin()))
                .collect();
            let out = m.infer(&frames).unwrap();
            let (gh, gw) = m.config().node_grid(9, 9);
            assert_eq!((gh, gw), (9 / pool, 9 / pool));
            for o in &out {
                assert_eq!(o.embedding.shape(), &[gh * gw, 16]);
                for row in o.embedding.data().chunks(16) {
                    let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    /// Central differences on every parameter element against `param_grads`.
    fn param_gradcheck(model: &Model, tol: f64, loss: impl Fn(&Model, &mut Tape, &Bound) -> Var) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, |_| true);
        let l = loss(model, &mut tape, &b);
        let grads = tape.backward(l).unwrap().param_grads(&tape, model.params());
        let eval = |m: &Model| {
            let mut t = Tape::new();
            let b = m.bind(&mut t, |_| false);
            let l = loss(m, &mut t, &b);
            t.value(l).item()
        };
        let step = 1e-5;
        for id in model.params().ids() {
            for i in 0..model.params().get(id).numel() {
                let mut plus = model.clone();
                plus.params_mut().get_mut(id).data_mut()[i] += step;
                let mut minus = model.clone();
                minus.params_mut().get_mut(id).data_mut()[i] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = grads.get(id).data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < tol, "{}[{i}]: {a} vs {numeric}", model.params().name(id));
            }
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let m = Model::new(tiny()).unwrap();
        let frame = Tensor::from_fn(&[1, 6, 6], |i| ((i * 7) as f64 * 0.37).sin());
        gradcheck(&[frame.clone()], 1e-4, |tape, v| {
            let b = m.bind(tape, |_| false);
            let f = m.encode_frame(tape, &b, v[0]).unwrap();
            weighted_sum(tape, f, 1)
        });
        param_gradcheck(&m, 1e-4, |m, tape, b| {
            let x = tape.constant(frame.clone());
            let f = m.encode_frame(tape, b, x).unwrap();
            weighted_sum(tape, f, 2)
        });
    }

    #[test]
    fn gru_step_gradcheck() {
        let m = Model::new(tiny()).unwrap();
        let feat = Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.41).sin());
        let prev = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.23).cos() * 0.8);
        gradcheck(&[feat.clone(), prev.clone()], 1e-4, |tape, v| {
            let b = m.bind(tape, |_| false);
            let out = m.gru_step(tape, &b, v[0], v[1]).unwrap();
            weighted_sum(tape, out, 3)
        });
        param_gradcheck(&m, 1e-4, |m, tape, b| {
            let f = tape.constant(feat.clone());
            let p = tape.constant(prev.clone());
            let out = m.gru_step(tape, b, f, p).unwrap();
            weighted_sum(tape, out, 4)
        });
    }

    #[test]
    fn memory_stays_inside_unit_interval() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let frames: Vec<Tensor> = (0..6)
            .map(|t| Tensor::from_fn(&[4, 8, 8], |i| ((i * 5 + t) as f64).sin() * 3.0))
            .collect();
        for mem in m.memories(&frames).unwrap() {
            assert!(mem.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn infer_matches_differentiable_rollout() {
        let m = Model::new(tiny()).unwrap();
        let frames: Vec<Tensor> = (0..4)
            .map(|t| Tensor::from_fn(&[1, 5, 5], |i| ((i * 3 + t) as f64 * 0.21).cos()))
            .collect();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let vars = m.rollout(&mut tape, &b, &frames).unwrap();
        let out = m.infer(&frames).unwrap();
        for (v, o) in vars.iter().zip(&out) {
            assert_eq!(tape.value(v.heatmap), &o.heatmap);
            assert_eq!(tape.value(v.embedding), &o.embedding);
        }
    }
}
