//! Greedy center tracking with walker-based hypotheses for hidden objects.
//!
//! Visible tracks are matched to heatmap peaks first. Every track left
//! without a match carries a walker over the node grid which is advanced by
//! the frame's transition matrix; its most likely cell is the object's
//! hypothesized center until a detection near it re-appears, the belief
//! becomes too flat, it reaches the frame border, or the track gets too old.

mod format;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Neighborhood, Tensor};
use crate::error::{Error, Result};
use crate::model::{FrameOutput, Model, ModelConfig};
use crate::walk::{self, argmax, local_graph, one_hot, Grid, TransitionMatrix};
use crate::worldgen::{BBox, SceneSequence};

pub use format::{parse_tracks, read_tracks, render_tracks, write_tracks, TrackRecord, TRACKS_HEADER};

/// How hidden-object hypotheses move between frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkPolicy {
    /// Transitions from the learned memory embeddings.
    Learned,
    /// Identity transitions: the hypothesis stays at the last visible cell.
    MemorizeLast,
}

/// Where `refine_box` puts the target relative to the nearest visible box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineOffset {
    /// Bottom-aligned inside the container: `(container_h - target_h) / 2`.
    Inside,
    /// Just under the container: `container_h / 2 + target_h / 2`.
    Below,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub conf_det: f64,
    pub conf_th: f64,
    pub max_age: usize,
    /// Gate multiplier on `sqrt(w * h)` of a track's last visible box.
    pub gate: f64,
    /// Center displacement, in node cells, that counts as motion.
    pub move_threshold: f64,
    pub policy: WalkPolicy,
    pub tau: f64,
    /// Local attention radius as a fraction of the node-grid height.
    pub radius_frac: Option<f64>,
    pub refine_offset: RefineOffset,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            conf_det: 0.3,
            conf_th: 0.05,
            max_age: 16,
            gate: 1.0,
            move_threshold: 1.0,
            policy: WalkPolicy::Learned,
            tau: 0.1,
            radius_frac: Some(0.2),
            refine_offset: RefineOffset::Inside,
        }
    }
}

impl TrackerConfig {
    /// Settings for long containment episodes.
    pub fn containment() -> Self {
        Self {
            conf_th: 0.005,
            max_age: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.conf_det > 0.0 && self.conf_det < 1.0) {
            return Err(Error::Config(format!("conf_det must lie in (0, 1), got {}", self.conf_det)));
        }
        if self.max_age == 0 {
            return Err(Error::Config("max_age must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !(self.gate >= 0.0) {
            return Err(Error::Config("tau must be positive and gate non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Heatmap cell, row-major.
    pub cell: usize,
    /// Pixel coordinates of the cell center.
    pub center: (f64, f64),
    pub bbox: BBox,
    pub confidence: f64,
}

/// Peaks of `heatmap` over their 3x3 neighborhood with value at least
/// `conf_det`, by descending confidence then row-major cell.
pub fn detect_visible(heatmap: &Tensor, size: &Tensor, conf_det: f64, scale: f64) -> Vec<Detection> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let p = heatmap.data();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = p[r * w + c];
            if v < conf_det {
                continue;
            }
            let peak = (r.saturating_sub(1)..(r + 2).min(h))
                .flat_map(|rr| (c.saturating_sub(1)..(c + 2).min(w)).map(move |cc| (rr, cc)))
                .all(|(rr, cc)| p[rr * w + cc] <= v);
            if !peak {
                continue;
            }
            let center = ((c as f64 + 0.5) * scale, (r as f64 + 0.5) * scale);
            let bw = size.data()[r * w + c].max(0.0);
            let bh = size.data()[h * w + r * w + c].max(0.0);
            out.push(Detection {
                cell: r * w + c,
                center,
                bbox: BBox::centered(center.0, center.1, bw, bh),
                confidence: v,
            });
        }
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub center: (f64, f64),
    pub bbox: BBox,
    pub confidence: f64,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub history: Vec<TrackPoint>,
    /// Belief over node cells; present only while the track is unmatched.
    pub walker: Option<Vec<f64>>,
    pub age_since_visible: usize,
    pub confidence: f64,
    /// Current center: the detection when visible, else the hypothesis.
    pub center: (f64, f64),
    pub last_visible: BBox,
    pub was_moving: bool,
    pub is_static: bool,
}

impl Track {
    pub fn new(id: u32, frame: usize, det: &Detection) -> Self {
        Self {
            id,
            history: vec![TrackPoint {
                frame,
                center: det.center,
                bbox: det.bbox,
                confidence: det.confidence,
                visible: true,
            }],
            walker: None,
            age_since_visible: 0,
            confidence: det.confidence,
            center: det.center,
            last_visible: det.bbox,
            was_moving: false,
            is_static: true,
        }
    }

    pub fn is_visible(&self) -> bool {
        self.walker.is_none()
    }

    pub fn gate(&self, kappa: f64) -> f64 {
        kappa * (self.last_visible.w * self.last_visible.h).max(0.0).sqrt()
    }

    fn last_visible_center(&self) -> Option<(f64, f64)> {
        self.history.iter().rev().find(|p| p.visible).map(|p| p.center)
    }

    /// Adopts a matched detection.
    pub fn observe(&mut self, frame: usize, det: &Detection, cell_size: f64, threshold: f64) {
        let moved = self
            .last_visible_center()
            .map(|c| dist(c, det.center) / cell_size >= threshold)
            .unwrap_or(false);
        self.was_moving = moved;
        self.is_static = !moved;
        self.walker = None;
        self.age_since_visible = 0;
        self.confidence = det.confidence;
        self.center = det.center;
        self.last_visible = det.bbox;
        self.history.push(TrackPoint {
            frame,
            center: det.center,
            bbox: det.bbox,
            confidence: det.confidence,
            visible: true,
        });
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Association {
    /// `(track index, detection index)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy matching: detections in the given order (by confidence) each claim
/// the nearest unclaimed track within that track's gate. Ties go to the
/// lower track index. Detections with `available[j] == false` are skipped.
pub fn associate(
    tracks: &[&Track],
    detections: &[Detection],
    available: &[bool],
    kappa: f64,
) -> Association {
    let mut taken = vec![false; tracks.len()];
    let mut out = Association::default();
    for (j, det) in detections.iter().enumerate() {
        if !available[j] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, t) in tracks.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist(t.center, det.center);
            if d <= t.gate(kappa) && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => {
                taken[i] = true;
                out.matches.push((i, j));
            }
            None => out.unmatched_detections.push(j),
        }
    }
    out.unmatched_tracks = (0..tracks.len()).filter(|&i| !taken[i]).collect();
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Termination {
    LowConfidence,
    Boundary,
    Age,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OccludedOutcome {
    Terminated(Termination),
    /// The hypothesis was matched to this detection.
    Rematched(usize),
    /// The track continues at this node cell.
    Hypothesized(usize),
}

/// Spatial layout shared by the tracker steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layout {
    /// Walk nodes.
    pub grid: Grid,
    /// Pixels per walk node.
    pub node_scale: f64,
}

/// One hidden-object step for an unmatched track.
///
/// Starts the walker one-hot at the track's center if it has none, advances
/// it by `a`, and reads the most likely cell. Detections marked available
/// may be claimed; a claimed one is marked unavailable.
pub fn occluded_step(
    track: &mut Track,
    a: &TransitionMatrix,
    layout: Layout,
    detections: &[Detection],
    available: &mut [bool],
    cfg: &TrackerConfig,
) -> OccludedOutcome {
    let grid = layout.grid;
    let walker = track.walker.take().unwrap_or_else(|| {
        let (x, y) = track.center;
        one_hot(grid.nodes(), grid.cell_of(x, y, layout.node_scale))
    });
    let walker = a.step(&walker);
    let (ind, conf) = argmax(&walker);
    track.walker = Some(walker);
    track.confidence = conf;
    if conf < cfg.conf_th {
        return OccludedOutcome::Terminated(Termination::LowConfidence);
    }
    if grid.is_boundary(ind) {
        return OccludedOutcome::Terminated(Termination::Boundary);
    }
    let hyp = grid.center_of(ind, layout.node_scale);
    let gate = track.gate(cfg.gate);
    let mut best: Option<(usize, f64)> = None;
    for (j, det) in detections.iter().enumerate() {
        let d = dist(hyp, det.center);
        if available[j] && d <= gate && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    if let Some((j, _)) = best {
        available[j] = false;
        return OccludedOutcome::Rematched(j);
    }
    let prev = track.center;
    track.is_static = dist(prev, hyp) / layout.node_scale < cfg.move_threshold;
    track.center = hyp;
    track.age_since_visible += 1;
    OccludedOutcome::Hypothesized(ind)
}

/// Drops tracks unseen for more than `max_age` frames; returns the dropped ids.
pub fn lifecycle(tracks: &mut Vec<Track>, max_age: usize) -> Vec<u32> {
    let dropped = tracks
        .iter()
        .filter(|t| t.age_since_visible > max_age)
        .map(|t| t.id)
        .collect();
    tracks.retain(|t| t.age_since_visible <= max_age);
    dropped
}

/// Box for the track's current frame following the visibility and motion
/// flags; `others` are the visible boxes of the frame.
pub fn predict_box(track: &Track, others: &[BBox], cfg: &TrackerConfig) -> BBox {
    if track.is_visible() {
        track.last_visible
    } else if track.was_moving {
        track.last_visible.with_center(track.center.0, track.center.1)
    } else if track.is_static {
        track.last_visible
    } else {
        refine_box(track.center, &track.last_visible, others, cfg.refine_offset)
    }
}

/// Places the target relative to the visible box nearest to `center`
/// (Euclidean, ties to the lower index), keeping the last visible size.
pub fn refine_box(
    center: (f64, f64),
    last_visible: &BBox,
    visible: &[BBox],
    offset: RefineOffset,
) -> BBox {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in visible.iter().enumerate() {
        let d = dist(center, b.center());
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let Some((i, _)) = best else {
        return last_visible.with_center(center.0, center.1);
    };
    let (cx, cy) = visible[i].center();
    let dy = match offset {
        RefineOffset::Inside => (visible[i].h - last_visible.h) / 2.0,
        RefineOffset::Below => visible[i].h / 2.0 + last_visible.h / 2.0,
    };
    last_visible.with_center(cx, cy + dy)
}

/// Walker belief of one hidden track at one frame, kept for visualization.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkerSnapshot {
    pub frame: usize,
    pub id: u32,
    pub belief: Vec<f64>,
    pub argmax: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameResult {
    pub records: Vec<TrackRecord>,
    pub walkers: Vec<WalkerSnapshot>,
    pub terminated: Vec<(u32, Termination)>,
}

/// Frame-by-frame tracking state machine.
pub struct TrackerSession {
    cfg: TrackerConfig,
    layout: Layout,
    heat_scale: f64,
    graph: Option<Arc<Neighborhood>>,
    tracks: Vec<Track>,
    next_id: u32,
    frame: usize,
    prev_embedding: Option<Tensor>,
}

impl TrackerSession {
    pub fn new(model_cfg: &ModelConfig, frame_size: (usize, usize), cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let (gh, gw) = model_cfg.node_grid(frame_size.0, frame_size.1);
        let grid = Grid::new(gh, gw);
        let graph = match cfg.radius_frac {
            Some(f) => Some(local_graph(grid, f * gh as f64)?),
            None => None,
        };
        Ok(Self {
            cfg,
            layout: Layout {
                grid,
                node_scale: model_cfg.node_scale(),
            },
            heat_scale: model_cfg.heat_scale(),
            graph,
            tracks: Vec::new(),
            next_id: 1,
            frame: 0,
            prev_embedding: None,
        })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Transition from the previous frame to this one, shared by all walkers.
    fn transition(&self, embedding: &Tensor) -> Result<TransitionMatrix> {
        let n = self.layout.grid.nodes();
        let Some(prev) = &self.prev_embedding else {
            return Ok(TransitionMatrix::identity(n));
        };
        match (self.cfg.policy, &self.graph) {
            (WalkPolicy::MemorizeLast, _) => Ok(TransitionMatrix::identity(n)),
            (WalkPolicy::Learned, Some(g)) => walk::affinity_on(prev, embedding, self.cfg.tau, g),
            (WalkPolicy::Learned, None) => walk::affinity_global(prev, embedding, self.cfg.tau),
        }
    }

    pub fn step(&mut self, out: &FrameOutput) -> Result<FrameResult> {
        let frame = self.frame;
        let dets = detect_visible(&out.heatmap, &out.size, self.cfg.conf_det, self.heat_scale);
        let a = self.transition(&out.embedding)?;
        let mut available = vec![true; dets.len()];
        let mut result = FrameResult::default();
        let cell = self.layout.node_scale;

        let visible: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].is_visible()).collect();
        let refs: Vec<&Track> = visible.iter().map(|&i| &self.tracks[i]).collect();
        let assoc = associate(&refs, &dets, &available, self.cfg.gate);
        let mut matched = vec![false; self.tracks.len()];
        for &(ti, dj) in &assoc.matches {
            let i = visible[ti];
            available[dj] = false;
            matched[i] = true;
            self.tracks[i].observe(frame, &dets[dj], cell, self.cfg.move_threshold);
        }

        let mut keep = vec![true; self.tracks.len()];
        for i in 0..self.tracks.len() {
            if matched[i] {
                continue;
            }
            let outcome = occluded_step(&mut self.tracks[i], &a, self.layout, &dets, &mut available, &self.cfg);
            match outcome {
                OccludedOutcome::Terminated(why) => {
                    keep[i] = false;
                    result.terminated.push((self.tracks[i].id, why));
                }
                OccludedOutcome::Rematched(j) => {
                    self.tracks[i].observe(frame, &dets[j], cell, self.cfg.move_threshold);
                }
                OccludedOutcome::Hypothesized(ind) => {
                    let t = &self.tracks[i];
                    result.walkers.push(WalkerSnapshot {
                        frame,
                        id: t.id,
                        belief: t.walker.clone().expect("walker set"),
                        argmax: ind,
                    });
                }
            }
        }
        let mut k = 0;
        self.tracks.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        for id in lifecycle(&mut self.tracks, self.cfg.max_age) {
            result.terminated.push((id, Termination::Age));
            result.walkers.retain(|w| w.id != id);
        }

        for (j, det) in dets.iter().enumerate() {
            if available[j] && det.confidence >= self.cfg.conf_det {
                self.tracks.push(Track::new(self.next_id, frame, det));
                self.next_id += 1;
            }
        }

        let others: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        for t in &mut self.tracks {
            let visible = t.is_visible();
            let bbox = predict_box(t, &others, &self.cfg);
            if !visible {
                t.history.push(TrackPoint {
                    frame,
                    center: t.center,
                    bbox,
                    confidence: t.confidence,
                    visible: false,
                });
            }
            result.records.push(TrackRecord {
                frame,
                id: t.id,
                bbox,
                confidence: t.confidence,
                visible,
            });
        }
        self.prev_embedding = Some(out.embedding.clone());
        self.frame += 1;
        Ok(result)
    }
}

/// Full tracker output for one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackOutput {
    pub records: Vec<TrackRecord>,
    pub walkers: Vec<WalkerSnapshot>,
}

pub fn track_outputs(
    model_cfg: &ModelConfig,
    frame_size: (usize, usize),
    outputs: &[FrameOutput],
    cfg: &TrackerConfig,
) -> Result<TrackOutput> {
    let mut session = TrackerSession::new(model_cfg, frame_size, cfg.clone())?;
    let mut out = TrackOutput::default();
    for o in outputs {
        let r = session.step(o)?;
        out.records.extend(r.records);
        out.walkers.extend(r.walkers);
    }
    Ok(out)
}

/// Runs the model over `seq` and tracks every frame.
pub fn track_sequence(model: &Model, seq: &SceneSequence, cfg: &TrackerConfig) -> Result<TrackOutput> {
    let outputs = model.infer(&seq.frames)?;
    track_outputs(model.config(), seq.frame_size(), &outputs, cfg)
}
