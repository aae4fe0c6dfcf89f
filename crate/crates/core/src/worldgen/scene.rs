use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

/// Number of rendered channels: target, wall, container, intensity.
pub const CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VisibilityState {
    Visible,
    Occluded,
    Contained,
    Carried,
}

impl VisibilityState {
    pub const ALL: [VisibilityState; 4] = [
        VisibilityState::Visible,
        VisibilityState::Occluded,
        VisibilityState::Contained,
        VisibilityState::Carried,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            VisibilityState::Visible => "visible",
            VisibilityState::Occluded => "occluded",
            VisibilityState::Contained => "contained",
            VisibilityState::Carried => "carried",
        }
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

/// Axis-aligned box in pixel units: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Box of size `w x h` centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    /// Whether `other` lies entirely inside `self`.
    pub fn encloses(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }

    pub fn with_center(&self, cx: f64, cy: f64) -> Self {
        Self::centered(cx, cy, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackEntry {
    pub center: (f64, f64),
    pub bbox: BBox,
    pub state: VisibilityState,
}

/// Ground-truth trajectory of one target. `None` entries are redacted frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub object_id: u32,
    pub entries: Vec<Option<TrackEntry>>,
}

impl ObjectTrack {
    /// Entry at `t` if the object is labeled visible there.
    pub fn visible_at(&self, t: usize) -> Option<&TrackEntry> {
        self.entries
            .get(t)?
            .as_ref()
            .filter(|e| e.state == VisibilityState::Visible)
    }

    pub fn first_visible(&self) -> Option<(usize, &TrackEntry)> {
        (0..self.entries.len()).find_map(|t| self.visible_at(t).map(|e| (t, e)))
    }

    pub fn has_redacted(&self) -> bool {
        self.entries.iter().any(Option::is_none)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropKind {
    Wall,
    Container,
}

/// Untracked scene element that can hide targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Prop {
    pub kind: PropKind,
    pub boxes: Vec<BBox>,
}

/// One generated video with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<Tensor>,
    pub tracks: Vec<ObjectTrack>,
    pub props: Vec<Prop>,
    pub seed: u64,
    pub config: super::ScenarioConfig,
}

impl SceneSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the rendered frames.
    pub fn frame_size(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    /// Frame counts per visibility state over all tracks, indexed by
    /// [`VisibilityState::index`]. Redacted entries are not counted.
    pub fn state_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in self.tracks.iter().flat_map(|t| t.entries.iter().flatten()) {
            counts[e.state.index()] += 1;
        }
        counts
    }

    pub fn has_redacted(&self) -> bool {
        self.tracks.iter().any(ObjectTrack::has_redacted)
    }

    /// Whether any target is hidden in any frame (labels or redaction).
    pub fn has_occlusion(&self) -> bool {
        self.tracks.iter().any(|t| {
            t.entries
                .iter()
                .any(|e| e.is_none_or(|e| e.state != VisibilityState::Visible))
        })
    }

    /// Copy with every non-visible entry replaced by `None`.
    pub fn redacted(&self) -> SceneSequence {
        let mut out = self.clone();
        for track in &mut out.tracks {
            for e in &mut track.entries {
                if e.is_some_and(|e| e.state != VisibilityState::Visible) {
                    *e = None;
                }
            }
        }
        out
    }
}
