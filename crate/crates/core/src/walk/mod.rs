//! Random walks over the spatial memory.
//!
//! Node embeddings of consecutive memory states define a row-stochastic
//! transition matrix; pushing a one-hot walker through the chain of
//! transitions gives a belief over each object's location, including frames
//! where the object cannot be seen. The losses that supervise this belief
//! live in [`loss`].

mod loss;

use std::sync::Arc;

use crate::diffcore::{vecmat, Neighborhood, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use loss::{
    focal, gaussian_radius, heatmap_target, loss_nll, loss_overlap, loss_ram, loss_visible,
    sigma_for, smoothing_mask, total_loss, Label, LossWeights, NegativeTerm, ObjectWalk, VisibleObject,
    LOG_EPS,
};

/// Rectangular lattice of walk nodes, indexed row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn nodes(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node / self.w, node % self.w)
    }

    pub fn l1(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    /// Node containing the pixel-space point `(x, y)` when each node spans
    /// `scale` pixels. Points outside the lattice are clamped onto it.
    pub fn cell_of(&self, x: f64, y: f64, scale: f64) -> usize {
        let clamp = |v: f64, n: usize| ((v / scale).floor().max(0.0) as usize).min(n - 1);
        self.index(clamp(y, self.h), clamp(x, self.w))
    }

    /// Pixel-space center of a node.
    pub fn center_of(&self, node: usize, scale: f64) -> (f64, f64) {
        let (r, c) = self.coords(node);
        ((c as f64 + 0.5) * scale, (r as f64 + 0.5) * scale)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let (r, c) = self.coords(node);
        r == 0 || c == 0 || r + 1 == self.h || c + 1 == self.w
    }

    /// Largest L1 distance between two nodes.
    pub fn l1_diameter(&self) -> usize {
        self.h + self.w - 2
    }

    /// Default local-attention radius: a fifth of the lattice height.
    pub fn default_radius(&self) -> f64 {
        0.2 * self.h as f64
    }
}

/// Neighbor lists with `|p_i - p_j|_1 < radius` (strict).
pub fn local_graph(grid: Grid, radius: f64) -> Result<Arc<Neighborhood>> {
    if !(radius >= 1.0) {
        return Err(Error::invalid(
            "local_graph",
            format!("radius must be at least one cell, got {radius}"),
        ));
    }
    let lists = (0..grid.nodes())
        .map(|i| {
            (0..grid.nodes())
                .filter(|&j| (grid.l1(i, j) as f64) < radius)
                .collect()
        })
        .collect();
    Ok(Arc::new(Neighborhood::from_lists(lists)))
}

/// Dense affinities `softmax_j(<q_i^t, q_j^{t+1}> / tau)` as an `[m, m]` variable.
pub fn affinity_global_var(tape: &mut Tape, q_t: Var, q_next: Var, tau: f64) -> Result<Var> {
    let (a, b) = (tape.shape(q_t), tape.shape(q_next));
    if a.len() != 2 || a != b {
        return Err(Error::shape("affinity_global", a, b));
    }
    let qt = tape.transpose(q_next)?;
    let logits = tape.matmul(q_t, qt)?;
    tape.softmax_rows(logits, tau)
}

/// A transition recorded on a tape.
#[derive(Clone, Debug)]
pub enum TransitionVar {
    Dense(Var),
    Local { values: Var, graph: Arc<Neighborhood> },
}

impl TransitionVar {
    /// Global affinities when `graph` is `None`, local ones otherwise.
    pub fn build(
        tape: &mut Tape,
        q_t: Var,
        q_next: Var,
        tau: f64,
        graph: Option<&Arc<Neighborhood>>,
    ) -> Result<Self> {
        match graph {
            None => Ok(Self::Dense(affinity_global_var(tape, q_t, q_next, tau)?)),
            Some(g) => Ok(Self::Local {
                values: tape.local_affinity(q_t, q_next, tau, g.clone())?,
                graph: g.clone(),
            }),
        }
    }

    /// `x A` for a walker `x` of shape `[m]`.
    pub fn step(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Dense(a) => tape.vecmat(x, *a),
            Self::Local { values, graph } => tape.local_walk(x, *values, graph.clone()),
        }
    }

    pub fn value(&self, tape: &Tape) -> TransitionMatrix {
        match self {
            Self::Dense(a) => TransitionMatrix::Dense {
                nodes: tape.shape(*a)[0],
                data: tape.value(*a).data().to_vec(),
            },
            Self::Local { values, graph } => TransitionMatrix::Local {
                graph: graph.clone(),
                values: tape.value(*values).data().to_vec(),
            },
        }
    }
}

/// Walker states `X^0, X^1, ..., X^n` for `n` recorded transitions.
pub fn rollout_var(tape: &mut Tape, x0: Var, transitions: &[TransitionVar]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(transitions.len() + 1);
    out.push(x0);
    let mut x = x0;
    for a in transitions {
        x = a.step(tape, x)?;
        out.push(x);
    }
    Ok(out)
}

/// Plain-value row-stochastic transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum TransitionMatrix {
    /// Row-major `[nodes, nodes]`.
    Dense { nodes: usize, data: Vec<f64> },
    /// One probability per edge of `graph`.
    Local {
        graph: Arc<Neighborhood>,
        values: Vec<f64>,
    },
}

impl TransitionMatrix {
    pub fn identity(nodes: usize) -> Self {
        let graph = Neighborhood::from_lists((0..nodes).map(|i| vec![i]).collect());
        Self::Local {
            graph: Arc::new(graph),
            values: vec![1.0; nodes],
        }
    }

    /// Dense matrix from row-major data, validated square.
    pub fn dense(nodes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nodes * nodes {
            return Err(Error::shape("transition", &[data.len()], &[nodes, nodes]));
        }
        Ok(Self::Dense { nodes, data })
    }

    pub fn nodes(&self) -> usize {
        match self {
            Self::Dense { nodes, .. } => *nodes,
            Self::Local { graph, .. } => graph.nodes(),
        }
    }

    /// Nonzero-capable entries of row `i` as `(column, probability)`.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        match self {
            Self::Dense { nodes, data } => (0..*nodes).map(|j| (j, data[i * nodes + j])).collect(),
            Self::Local { graph, values } => graph
                .neighbors(i)
                .iter()
                .copied()
                .zip(values[graph.span(i)].iter().copied())
                .collect(),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nodes())
            .map(|i| self.row(i).iter().map(|&(_, v)| v).sum())
            .collect()
    }

    /// One walker step `x A`.
    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Dense { data, .. } => vecmat(x, data),
            Self::Local { graph, values } => graph.propagate(x, values),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let m = self.nodes();
        let mut out = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for (j, v) in self.row(i) {
                out.data_mut()[i * m + j] = v;
            }
        }
        out
    }
}

fn check_embeddings(op: &'static str, q_t: &Tensor, q_next: &Tensor) -> Result<()> {
    if q_t.ndim() != 2 || q_t.shape() != q_next.shape() {
        return Err(Error::shape(op, q_t.shape(), q_next.shape()));
    }
    Ok(())
}

/// Dense transition from `[m, D_q]` embeddings of two consecutive frames.
pub fn affinity_global(q_t: &Tensor, q_next: &Tensor, tau: f64) -> Result<TransitionMatrix> {
    check_embeddings("affinity_global", q_t, q_next)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(q_t.clone()), tape.constant(q_next.clone()));
    let t = TransitionVar::build(&mut tape, a, b, tau, None)?;
    Ok(t.value(&tape))
}

/// Transition restricted to neighbors closer than `radius` in L1 on `grid`.
pub fn affinity_local(
    q_t: &Tensor,
    q_next: &Tensor,
    tau: f64,
    grid: Grid,
    radius: f64,
) -> Result<TransitionMatrix> {
    check_embeddings("affinity_local", q_t, q_next)?;
    let graph = local_graph(grid, radius)?;
    affinity_on(q_t, q_next, tau, &graph)
}

/// Local transition on a prebuilt neighbor graph.
pub fn affinity_on(
    q_t: &Tensor,
    q_next: &Tensor,
    tau: f64,
    graph: &Arc<Neighborhood>,
) -> Result<TransitionMatrix> {
    check_embeddings("affinity_local", q_t, q_next)?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(q_t.clone()), tape.constant(q_next.clone()));
    let t = TransitionVar::build(&mut tape, a, b, tau, Some(graph))?;
    Ok(t.value(&tape))
}

pub fn one_hot(nodes: usize, at: usize) -> Vec<f64> {
    let mut x = vec![0.0; nodes];
    x[at] = 1.0;
    x
}

/// Walker states `X^0, ..., X^n` under `n` transitions.
pub fn rollout(x0: &[f64], transitions: &[TransitionMatrix]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![x0.to_vec()];
    for a in transitions {
        if a.nodes() != x0.len() {
            return Err(Error::shape("rollout", &[x0.len()], &[a.nodes(), a.nodes()]));
        }
        let next = a.step(out.last().expect("nonempty"));
        out.push(next);
    }
    Ok(out)
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
