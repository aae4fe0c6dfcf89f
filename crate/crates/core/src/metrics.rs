//! Localization and identity metrics by visibility state.
//!
//! Predicted tracks are assigned one-to-one to ground-truth objects, greedily
//! by center distance in the first frame where both are visible. Each
//! labeled frame then scores the IoU of the assigned prediction (0 when it
//! has no box there). An occlusion episode is a maximal run of non-visible
//! frames with a visible frame on both sides; it is recovered when the
//! prediction with the best IoU just before and just after the run carries
//! the same id.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::TrackRecord;
use crate::worldgen::{BBox, SceneSequence, VisibilityState};

/// IoU threshold of the per-frame localization accuracy.
pub const MAP_IOU: f64 = 0.1;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Sums for one visibility state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateStats {
    pub frames: usize,
    pub iou_sum: f64,
    pub hits: usize,
}

impl StateStats {
    pub fn mean_iou(&self) -> Option<f64> {
        (self.frames > 0).then(|| self.iou_sum / self.frames as f64)
    }

    pub fn map(&self) -> Option<f64> {
        (self.frames > 0).then(|| self.hits as f64 / self.frames as f64)
    }

    fn add(&mut self, o: &StateStats) {
        self.frames += o.frames;
        self.iou_sum += o.iou_sum;
        self.hits += o.hits;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seed: u64,
    /// Indexed by [`VisibilityState::index`].
    pub states: [StateStats; 4],
    pub episodes: usize,
    pub recovered: usize,
    pub id_switches: usize,
    /// `(object_id, predicted id)` pairs of the assignment.
    pub assignment: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub states: [StateStats; 4],
    pub episodes: usize,
    pub recovered: usize,
    pub id_switches: usize,
    pub sequences: Vec<SequenceReport>,
}

impl EvalReport {
    pub fn mean_iou(&self, s: VisibilityState) -> Option<f64> {
        self.states[s.index()].mean_iou()
    }

    pub fn map(&self, s: VisibilityState) -> Option<f64> {
        self.states[s.index()].map()
    }

    pub fn recovery_rate(&self) -> Option<f64> {
        (self.episodes > 0).then(|| self.recovered as f64 / self.episodes as f64)
    }
}

type Boxes = BTreeMap<u32, BTreeMap<usize, (BBox, bool)>>;

fn index_predictions(pred: &[TrackRecord], frames: usize) -> Result<Boxes> {
    let mut by_id: Boxes = BTreeMap::new();
    for r in pred {
        if r.frame >= frames {
            return Err(Error::invalid(
                "evaluate",
                format!("prediction at frame {} but the sequence has {frames} frames", r.frame),
            ));
        }
        if by_id.entry(r.id).or_default().insert(r.frame, (r.bbox, r.visible)).is_some() {
            return Err(Error::invalid(
                "evaluate",
                format!("track {} has two records at frame {}", r.id, r.frame),
            ));
        }
    }
    Ok(by_id)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy one-to-one assignment of object index to predicted id.
fn assign(gt: &SceneSequence, by_id: &Boxes) -> Vec<Option<u32>> {
    let mut pairs: Vec<(f64, usize, usize, u32)> = Vec::new();
    for (i, track) in gt.tracks.iter().enumerate() {
        for (&id, boxes) in by_id {
            let first = (0..gt.len()).find_map(|t| {
                let g = track.visible_at(t)?;
                boxes.get(&t).filter(|(_, vis)| *vis).map(|(b, _)| (t, dist(g.bbox.center(), b.center())))
            });
            if let Some((t, d)) = first {
                pairs.push((d, t, i, id));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut out = vec![None; gt.tracks.len()];
    let mut used = std::collections::BTreeSet::new();
    for (_, _, i, id) in pairs {
        if out[i].is_none() && !used.contains(&id) {
            out[i] = Some(id);
            used.insert(id);
        }
    }
    out
}

/// Predicted id with the highest positive IoU against `g` at frame `t`;
/// ties go to the lower id.
fn best_id(by_id: &Boxes, t: usize, g: &BBox) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&id, boxes) in by_id {
        if let Some((b, _)) = boxes.get(&t) {
            let v = iou(g, b);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((id, v));
            }
        }
    }
    best.map(|(id, _)| id)
}

/// Scores one sequence. `gt` must carry labels for every frame.
pub fn evaluate(pred: &[TrackRecord], gt: &SceneSequence) -> Result<SequenceReport> {
    if gt.has_redacted() {
        return Err(Error::invalid("evaluate", "ground truth is redacted".to_string()));
    }
    let by_id = index_predictions(pred, gt.len())?;
    let assigned = assign(gt, &by_id);
    let mut report = SequenceReport {
        seed: gt.seed,
        ..SequenceReport::default()
    };
    for (i, track) in gt.tracks.iter().enumerate() {
        if let Some(id) = assigned[i] {
            report.assignment.push((track.object_id, id));
        }
        for (t, e) in track.entries.iter().enumerate() {
            let e = e.as_ref().expect("unredacted");
            let v = assigned[i]
                .and_then(|id| by_id[&id].get(&t))
                .map_or(0.0, |(b, _)| iou(&e.bbox, b));
            let s = &mut report.states[e.state.index()];
            s.frames += 1;
            s.iou_sum += v;
            if v >= MAP_IOU {
                s.hits += 1;
            }
        }

        let visible = |t: usize| track.visible_at(t).is_some();
        let mut t = 1;
        while t < track.entries.len() {
            if visible(t) || !visible(t - 1) {
                t += 1;
                continue;
            }
            let start = t;
            while t < track.entries.len() && !visible(t) {
                t += 1;
            }
            if t == track.entries.len() {
                break;
            }
            report.episodes += 1;
            let before = best_id(&by_id, start - 1, &track.visible_at(start - 1).expect("visible").bbox);
            let after = best_id(&by_id, t, &track.visible_at(t).expect("visible").bbox);
            if before.is_some() && before == after {
                report.recovered += 1;
            }
        }

        let mut last: Option<u32> = None;
        for (t, e) in track.entries.iter().enumerate() {
            let e = e.as_ref().expect("unredacted");
            if let Some(id) = best_id(&by_id, t, &e.bbox) {
                if last.is_some_and(|l| l != id) {
                    report.id_switches += 1;
                }
                last = Some(id);
            }
        }
    }
    Ok(report)
}

pub fn aggregate(sequences: Vec<SequenceReport>) -> EvalReport {
    let mut out = EvalReport::default();
    for s in &sequences {
        for k in 0..4 {
            out.states[k].add(&s.states[k]);
        }
        out.episodes += s.episodes;
        out.recovered += s.recovered;
        out.id_switches += s.id_switches;
    }
    out.sequences = sequences;
    out
}

pub fn evaluate_dataset(pred: &[Vec<TrackRecord>], gt: &[SceneSequence]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} track sets for {} sequences", pred.len(), gt.len()),
        ));
    }
    let reports = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| evaluate(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(reports))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Text table: one row per visibility state, then identity statistics.
pub fn render_table(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:>7} {:>9} {:>8}", "state", "frames", "mean_iou", "map@0.1").expect("write");
    for st in VisibilityState::ALL {
        let x = &r.states[st.index()];
        writeln!(s, "{:<10} {:>7} {:>9} {:>8}", st.name(), x.frames, cell(x.mean_iou()), cell(x.map()))
            .expect("write");
    }
    writeln!(
        s,
        "episodes {} recovered {} recovery_rate {} id_switches {}",
        r.episodes,
        r.recovered,
        cell(r.recovery_rate()),
        r.id_switches
    )
    .expect("write");
    s
}

/// One JSON object per sequence.
pub fn render_jsonl(r: &EvalReport) -> String {
    let mut s = String::new();
    for (i, seq) in r.sequences.iter().enumerate() {
        let mut v = serde_json::to_value(seq).expect("serializable");
        v["index"] = i.into();
        s.push_str(&serde_json::to_string(&v).expect("serializable"));
        s.push('\n');
    }
    s
}
