use serde::{Deserialize, Serialize};

use super::Grid;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm of the focal losses.
pub const LOG_EPS: f64 = 1e-12;

/// Which cells of the masked walker map receive the focal negative term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeTerm {
    /// Every cell other than the ground-truth one is a down-weighted negative.
    FullMap,
    /// Only the positive term; the mask re-weights the ground-truth cell alone.
    PositiveOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ram: f64,
    pub lambda_over: f64,
    /// Softmax temperature of the affinities.
    pub tau: f64,
    /// Local attention radius as a fraction of the node-grid height.
    /// `None` uses dense global affinities.
    pub radius_frac: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub negative: NegativeTerm,
    /// Weight of the L1 size term inside the visible loss.
    pub size_weight: f64,
    /// Overlap used by the gaussian radius rule for smoothing and targets.
    pub min_overlap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ram: 0.5,
            lambda_over: 50.0,
            tau: 0.1,
            radius_frac: Some(0.2),
            alpha: 2.0,
            beta: 4.0,
            negative: NegativeTerm::FullMap,
            size_weight: 0.1,
            min_overlap: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_ram >= 0.0 && self.lambda_over >= 0.0 && self.size_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("focal exponents must be non-negative".into()));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return Err(Error::Config("min_overlap must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Whether the walk needs to be computed at all.
    pub fn uses_walk(&self) -> bool {
        self.lambda_ram != 0.0 || self.lambda_over != 0.0
    }

    /// Radius in cells for a grid, or `None` for dense affinities.
    pub fn radius(&self, grid: Grid) -> Option<f64> {
        self.radius_frac.map(|f| f * grid.h as f64)
    }
}

fn pow(tape: &mut Tape, x: Var, e: f64) -> Var {
    if e == 0.0 {
        let shape = tape.shape(x).to_vec();
        return tape.constant(Tensor::full(&shape, 1.0));
    }
    if e.fract() == 0.0 && e <= 8.0 {
        let mut out = x;
        for _ in 1..e as usize {
            out = tape.mul(out, x).expect("same shape");
        }
        return out;
    }
    let l = tape.log_clamped(x, LOG_EPS);
    let l = tape.scale(l, e);
    tape.exp(l)
}

fn abs(tape: &mut Tape, x: Var) -> Result<Var> {
    let pos = tape.relu(x);
    let neg = tape.scale(x, -1.0);
    let neg = tape.relu(neg);
    tape.add(pos, neg)
}

/// Focal loss of a probability map `pred` (any shape, read flat).
///
/// Positive cells contribute `-(1-p)^alpha log p`. When `neg_weight` is
/// given, every cell contributes `-w p^alpha log(1-p)`; callers zero the
/// weight at positive cells.
pub fn focal(
    tape: &mut Tape,
    pred: Var,
    positives: &[usize],
    neg_weight: Option<&Tensor>,
    alpha: f64,
) -> Result<Var> {
    let n = tape.value(pred).numel();
    let flat = tape.reshape(pred, &[n])?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    if !positives.is_empty() {
        let p = tape.gather(flat, positives)?;
        let q = tape.affine(p, -1.0, 1.0);
        let w = pow(tape, q, alpha);
        let l = tape.log_clamped(p, LOG_EPS);
        let t = tape.mul(w, l)?;
        let s = tape.sum(t);
        let s = tape.scale(s, -1.0);
        total = tape.add(total, s)?;
    }
    if let Some(weight) = neg_weight {
        if weight.numel() != n {
            return Err(Error::shape("focal", weight.shape(), &[n]));
        }
        let wv = tape.constant(weight.clone().reshape(&[n])?);
        let pa = pow(tape, flat, alpha);
        let q = tape.affine(flat, -1.0, 1.0);
        let l = tape.log_clamped(q, LOG_EPS);
        let t = tape.mul(pa, l)?;
        let t = tape.mul(t, wv)?;
        let s = tape.sum(t);
        let s = tape.scale(s, -1.0);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Gaussian radius such that a box displaced within it keeps at least
/// `min_overlap` IoU with the original (the usual center-heatmap rule).
pub fn gaussian_radius(h: f64, w: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / 2.0;
    let r1 = root(1.0, h + w, w * h * (1.0 - o) / (1.0 + o));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - o) * w * h);
    let r3 = root(4.0 * o, -2.0 * o * (h + w), (o - 1.0) * w * h);
    r1.min(r2).min(r3).max(0.0)
}

/// Standard deviation of the gaussian drawn for a `w x h` box (in cells).
pub fn sigma_for(w: f64, h: f64, min_overlap: f64) -> f64 {
    (2.0 * gaussian_radius(h, w, min_overlap) + 1.0) / 6.0
}

fn sq_dist(grid: Grid, a: usize, b: usize) -> f64 {
    let (ra, ca) = grid.coords(a);
    let (rb, cb) = grid.coords(b);
    let (dr, dc) = (ra as f64 - rb as f64, ca as f64 - cb as f64);
    dr * dr + dc * dc
}

/// `1 - exp(-d^2 / 2 sigma^2)` around `center`, forced to 1 at the center.
pub fn smoothing_mask(grid: Grid, center: usize, sigma: f64) -> Tensor {
    let mut m = Tensor::from_fn(&[grid.h, grid.w], |i| {
        if sigma > 0.0 {
            1.0 - (-sq_dist(grid, i, center) / (2.0 * sigma * sigma)).exp()
        } else {
            1.0
        }
    });
    m.data_mut()[center] = 1.0;
    m
}

/// Ground-truth location and smoothing mask for one visible frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub cell: usize,
    pub mask: Tensor,
}

/// Focal negative log-likelihood of the walker `x` against `label`.
pub fn loss_nll(tape: &mut Tape, x: Var, label: &Label, w: &LossWeights) -> Result<Var> {
    let n = tape.value(x).numel();
    if label.mask.numel() != n || label.cell >= n {
        return Err(Error::shape("loss_nll", &[n], label.mask.shape()));
    }
    let flat = tape.reshape(x, &[n])?;
    let mask = tape.constant(label.mask.clone().reshape(&[n])?);
    let masked = tape.mul(flat, mask)?;
    let neg = match w.negative {
        NegativeTerm::FullMap => {
            let mut nw = Tensor::from_fn(&[n], |i| label.mask.data()[i].powf(w.beta));
            nw.data_mut()[label.cell] = 0.0;
            Some(nw)
        }
        NegativeTerm::PositiveOnly => None,
    };
    focal(tape, masked, &[label.cell], neg.as_ref(), w.alpha)
}

/// One object's walker states and labels, both indexed by frame.
///
/// `states[t]` is `None` before the walk starts; `labels[t]` is `None`
/// wherever the object is not visible.
#[derive(Clone, Debug, Default)]
pub struct ObjectWalk {
    pub states: Vec<Option<Var>>,
    pub labels: Vec<Option<Label>>,
}

/// Mean over objects of the summed per-frame NLL at labeled frames.
pub fn loss_ram(tape: &mut Tape, walks: &[ObjectWalk], w: &LossWeights) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    if walks.is_empty() {
        return Ok(total);
    }
    for walk in walks {
        for (state, label) in walk.states.iter().zip(&walk.labels) {
            if let (Some(x), Some(label)) = (state, label) {
                let l = loss_nll(tape, *x, label, w)?;
                total = tape.add(total, l)?;
            }
        }
    }
    Ok(tape.scale(total, 1.0 / walks.len() as f64))
}

/// Walker mass that hidden objects place on other objects' visible centers,
/// averaged over contributing (object, frame) pairs.
pub fn loss_overlap(tape: &mut Tape, walks: &[ObjectWalk]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut pairs = 0usize;
    for (i, walk) in walks.iter().enumerate() {
        for (t, state) in walk.states.iter().enumerate() {
            let Some(x) = state else { continue };
            if walk.labels.get(t).is_some_and(Option::is_some) {
                continue;
            }
            let others: Vec<usize> = walks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(_, o)| o.labels.get(t).and_then(|l| l.as_ref()).map(|l| l.cell))
                .collect();
            if others.is_empty() {
                continue;
            }
            let n = tape.value(*x).numel();
            let flat = tape.reshape(*x, &[n])?;
            let g = tape.gather(flat, &others)?;
            let s = tape.sum(g);
            total = tape.add(total, s)?;
            pairs += 1;
        }
    }
    if pairs > 0 {
        total = tape.scale(total, 1.0 / pairs as f64);
    }
    Ok(total)
}

/// A visible object as seen by the center and size heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibleObject {
    pub cell: usize,
    /// Box width and height in pixels.
    pub size: (f64, f64),
    /// Gaussian spread in heatmap cells.
    pub sigma: f64,
}

/// Center-heatmap target: the max over objects of unnormalized gaussians.
pub fn heatmap_target(grid: Grid, objects: &[VisibleObject]) -> Tensor {
    let mut y = Tensor::zeros(&[grid.h, grid.w]);
    for o in objects {
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let g = if o.sigma > 0.0 {
                (-sq_dist(grid, i, o.cell) / (2.0 * o.sigma * o.sigma)).exp()
            } else {
                0.0
            };
            *v = v.max(g);
        }
    }
    for o in objects {
        y.data_mut()[o.cell] = 1.0;
    }
    y
}

/// Center focal loss plus L1 size regression at visible centers, each
/// normalized by the object count.
pub fn loss_visible(
    tape: &mut Tape,
    heatmap: Var,
    size: Var,
    objects: &[VisibleObject],
    w: &LossWeights,
) -> Result<Var> {
    let hs = tape.shape(heatmap).to_vec();
    let ss = tape.shape(size).to_vec();
    if hs.len() != 2 || ss != [2, hs[0], hs[1]] {
        return Err(Error::shape("loss_visible", &hs, &ss));
    }
    let grid = Grid::new(hs[0], hs[1]);
    let y = heatmap_target(grid, objects);
    let mut positives: Vec<usize> = objects.iter().map(|o| o.cell).collect();
    positives.sort_unstable();
    positives.dedup();
    let mut nw = Tensor::from_fn(&[grid.nodes()], |i| (1.0 - y.data()[i]).powf(w.beta));
    for &p in &positives {
        nw.data_mut()[p] = 0.0;
    }
    let norm = 1.0 / objects.len().max(1) as f64;
    let center = focal(tape, heatmap, &positives, Some(&nw), w.alpha)?;
    let mut total = tape.scale(center, norm);
    if !objects.is_empty() && w.size_weight != 0.0 {
        let m = grid.nodes();
        let idx: Vec<usize> = objects.iter().flat_map(|o| [o.cell, m + o.cell]).collect();
        let target: Vec<f64> = objects.iter().flat_map(|o| [o.size.0, o.size.1]).collect();
        let flat = tape.reshape(size, &[2 * m])?;
        let pred = tape.gather(flat, &idx)?;
        let target = tape.constant(Tensor::new(&[idx.len()], target)?);
        let diff = tape.sub(pred, target)?;
        let l1 = abs(tape, diff)?;
        let l1 = tape.sum(l1);
        let l1 = tape.scale(l1, w.size_weight * norm);
        total = tape.add(total, l1)?;
    }
    Ok(total)
}

/// `L_vis + lambda_ram * L_RAM + lambda_over * L_over`; zero weights drop
/// their term entirely.
pub fn total_loss(
    tape: &mut Tape,
    visible: Var,
    ram: Option<Var>,
    over: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = visible;
    if let Some(r) = ram.filter(|_| w.lambda_ram != 0.0) {
        let r = tape.scale(r, w.lambda_ram);
        total = tape.add(total, r)?;
    }
    if let Some(o) = over.filter(|_| w.lambda_over != 0.0) {
        let o = tape.scale(o, w.lambda_over);
        total = tape.add(total, o)?;
    }
    Ok(total)
}
