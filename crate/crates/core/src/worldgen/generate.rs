use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{
    BBox, ObjectTrack, Prop, PropKind, SceneSequence, TrackEntry, VisibilityState, CHANNELS,
};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 200;

/// Parameters of the procedural occlusion world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per sequence.
    pub length: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Static walls drawn in front of targets.
    pub occluders: usize,
    /// Containers drawn in front of everything.
    pub containers: usize,
    /// Inclusive side-length range of square targets.
    pub target_size: [usize; 2],
    pub occluder_width: [usize; 2],
    pub occluder_height: [usize; 2],
    pub container_size: usize,
    /// Inclusive speed range in pixels per frame.
    pub speed: [usize; 2],
    /// Relative weights of constant-velocity, turning, stop-and-go motion.
    pub motion_mix: [f64; 3],
    /// Maximum camera offset in pixels; 0 disables drift.
    pub camera_drift: usize,
    /// Probability of scripting a containment and carrying episode.
    pub carry_prob: f64,
    /// Inclusive range of carry displacement in pixels.
    pub carry_distance: [usize; 2],
    /// Fraction of a target's box that must be painted over to hide it.
    pub coverage_threshold: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            length: 16,
            min_objects: 1,
            max_objects: 1,
            occluders: 1,
            containers: 0,
            target_size: [2, 2],
            occluder_width: [4, 6],
            occluder_height: [6, 10],
            container_size: 4,
            speed: [1, 1],
            motion_mix: [1.0, 0.0, 0.0],
            camera_drift: 0,
            carry_prob: 0.0,
            carry_distance: [4, 6],
            coverage_threshold: 0.9,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Single target crossing behind one static wall at constant velocity.
    pub fn pass_behind() -> Self {
        Self::default()
    }

    /// Single target covered by a container that then carries it.
    pub fn carrying() -> Self {
        Self {
            length: 24,
            occluders: 0,
            containers: 1,
            carry_prob: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length < 2 {
            return bad(format!("length must be at least 2, got {}", self.length));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        for (name, r) in [
            ("target_size", self.target_size),
            ("occluder_width", self.occluder_width),
            ("occluder_height", self.occluder_height),
            ("speed", self.speed),
            ("carry_distance", self.carry_distance),
        ] {
            if r[0] > r[1] || r[0] == 0 {
                return bad(format!("{name} range {r:?} is empty or starts at zero"));
            }
        }
        if !(0.0..=1.0).contains(&self.carry_prob) {
            return bad(format!("carry_prob {} outside [0,1]", self.carry_prob));
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return bad(format!(
                "coverage_threshold {} outside (0,1]",
                self.coverage_threshold
            ));
        }
        if self.motion_mix.iter().any(|w| *w < 0.0) || self.motion_mix.iter().sum::<f64>() <= 0.0
        {
            return bad("motion_mix weights must be non-negative and not all zero".into());
        }
        Ok(())
    }

    fn usable(&self) -> (i32, i32, i32, i32) {
        let d = self.camera_drift as i32;
        (d, d, self.width as i32 - d, self.height as i32 - d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x: i32,
    y: i32,
    w: i32,
    h: i32,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }

    fn to_bbox(self, dx: i32, dy: i32) -> BBox {
        BBox::new(
            (self.x - dx) as f64,
            (self.y - dy) as f64,
            self.w as f64,
            self.h as f64,
        )
    }

    fn moved(self, dx: i32, dy: i32) -> Rect {
        Rect {
            x: self.x + dx,
            y: self.y + dy,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Motion {
    Constant,
    Turning,
    StopAndGo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Layer {
    Target,
    Wall,
    Container,
}

impl Layer {
    fn channel(self) -> usize {
        match self {
            Layer::Target => 0,
            Layer::Wall => 1,
            Layer::Container => 2,
        }
    }
}

/// Per-frame world-space rectangles of every drawable entity, back to front.
struct Layout {
    layers: Vec<Layer>,
    intensity: Vec<f64>,
    rects: Vec<Vec<Rect>>,
    camera: Vec<(i32, i32)>,
    targets: usize,
}

fn pick(rng: &mut ChaCha8Rng, r: [usize; 2]) -> i32 {
    rng.gen_range(r[0]..=r[1]) as i32
}

/// Generates one labeled sequence. Deterministic in `(config, seed)`.
pub fn generate_sequence(config: &ScenarioConfig, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        match plan(config, &mut rng) {
            Ok(layout) => {
                let seq = realize(config, seed, &layout);
                if acceptable(config, &seq) {
                    return Ok(seq);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Infeasible(format!(
            "no valid layout after {MAX_ATTEMPTS} attempts for a {}x{} grid",
            config.height, config.width
        ))
    }))
}

fn acceptable(config: &ScenarioConfig, seq: &SceneSequence) -> bool {
    let first_visible = seq
        .tracks
        .iter()
        .all(|t| matches!(t.entries[0], Some(e) if e.state == VisibilityState::Visible));
    if !first_visible {
        return false;
    }
    let needs_episode = config.occluders >= 1 && config.length >= 8;
    let needs_carry = config.containers >= 1 && config.carry_prob >= 1.0;
    let hidden = |pred: fn(VisibilityState) -> bool| {
        seq.tracks
            .iter()
            .flat_map(|t| t.entries.iter().flatten())
            .any(|e| pred(e.state))
    };
    if needs_episode && !hidden(|s| s == VisibilityState::Occluded) {
        return false;
    }
    if needs_carry && !hidden(|s| s == VisibilityState::Carried) {
        return false;
    }
    true
}

fn infeasible(msg: &str) -> Error {
    Error::Infeasible(msg.to_string())
}

fn plan(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let t_len = config.length;
    let (x0, y0, x1, y1) = config.usable();
    if x1 - x0 < 4 || y1 - y0 < 4 {
        return Err(infeasible("usable area smaller than 4x4 after camera margin"));
    }
    let n_targets = rng.gen_range(config.min_objects..=config.max_objects);
    let carry = config.containers >= 1 && n_targets >= 1 && rng.gen_bool(config.carry_prob);
    let carried_target = carry.then(|| n_targets - 1);

    let mut statics: Vec<Rect> = Vec::new();
    let mut walls = Vec::new();
    for k in 0..config.occluders {
        let w = pick(rng, config.occluder_width);
        let h = pick(rng, config.occluder_height);
        if w > x1 - x0 || h > y1 - y0 {
            return Err(infeasible("occluder larger than the grid"));
        }
        let x = if k == 0 {
            let mid = (x0 + x1) / 2 - w / 2 + rng.gen_range(-1..=1);
            mid.clamp(x0, x1 - w)
        } else {
            rng.gen_range(x0..=x1 - w)
        };
        let y = rng.gen_range(y0..=y1 - h);
        walls.push(Rect { x, y, w, h });
        statics.push(Rect { x, y, w, h });
    }

    let mut target_paths: Vec<Vec<Rect>> = Vec::with_capacity(n_targets);
    let mut container_path: Option<Vec<Rect>> = None;
    let mut occupied: Vec<Rect> = Vec::new();

    for i in 0..n_targets {
        let s = pick(rng, config.target_size);
        if Some(i) == carried_target {
            let (tp, cp) = carry_script(config, rng, s, &occupied, &statics)?;
            occupied.push(tp[0]);
            occupied.push(cp[0]);
            target_paths.push(tp);
            container_path = Some(cp);
        } else if i == 0 && !walls.is_empty() {
            let path = crossing_script(config, rng, s, walls[0])?;
            occupied.push(path[0]);
            target_paths.push(path);
        } else {
            let path = random_path(config, rng, s, &occupied, &statics)?;
            occupied.push(path[0]);
            target_paths.push(path);
        }
    }

    let mut camera = vec![(0, 0); t_len];
    let d = config.camera_drift as i32;
    for t in 1..t_len {
        let (cx, cy) = camera[t - 1];
        camera[t] = (
            (cx + rng.gen_range(-1..=1)).clamp(-d, d),
            (cy + rng.gen_range(-1..=1)).clamp(-d, d),
        );
    }

    let mut layers = Vec::new();
    let mut intensity = Vec::new();
    let mut rects = Vec::new();
    for (i, p) in target_paths.into_iter().enumerate() {
        layers.push(Layer::Target);
        intensity.push(1.0 - 0.2 * (i % 3) as f64);
        rects.push(p);
    }
    for w in walls {
        layers.push(Layer::Wall);
        intensity.push(0.6);
        rects.push(vec![w; t_len]);
    }
    for k in 0..config.containers {
        let path = match (k, container_path.take()) {
            (0, Some(p)) => p,
            _ => {
                let s = config.container_size as i32;
                let x = rng.gen_range(x0..=(x1 - s).max(x0));
                let y = rng.gen_range(y0..=(y1 - s).max(y0));
                vec![Rect { x, y, w: s, h: s }; t_len]
            }
        };
        layers.push(Layer::Container);
        intensity.push(0.8);
        rects.push(path);
    }
    Ok(Layout {
        layers,
        intensity,
        rects,
        camera,
        targets: n_targets,
    })
}

fn crossing_script(
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    size: i32,
    wall: Rect,
) -> Result<Vec<Rect>> {
    let (x0, _, x1, _) = config.usable();
    if size > wall.h || size >= wall.w {
        return Err(infeasible("target cannot hide behind the occluder"));
    }
    let y = rng.gen_range(wall.y..=wall.y + wall.h - size);
    let speed = pick(rng, config.speed);
    let gap = rng.gen_range(1..=2);
    let left = wall.x - size - gap;
    let right = wall.x + wall.w + gap;
    let mut options = Vec::new();
    if left >= x0 {
        options.push((left, 1));
    }
    if right + size <= x1 {
        options.push((right, -1));
    }
    let &(x, dir) = options
        .choose(rng)
        .ok_or_else(|| infeasible("no room beside the occluder"))?;
    let start = Rect {
        x,
        y,
        w: size,
        h: size,
    };
    Ok(simulate(config, rng, start, (dir * speed, 0), Motion::Constant))
}

fn random_path(
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    size: i32,
    occupied: &[Rect],
    statics: &[Rect],
) -> Result<Vec<Rect>> {
    let (x0, y0, x1, y1) = config.usable();
    if size > x1 - x0 || size > y1 - y0 {
        return Err(infeasible("target larger than the grid"));
    }
    let start = (0..100)
        .map(|_| Rect {
            x: rng.gen_range(x0..=x1 - size),
            y: rng.gen_range(y0..=y1 - size),
            w: size,
            h: size,
        })
        .find(|r| !occupied.iter().chain(statics).any(|o| o.overlaps(r)))
        .ok_or_else(|| infeasible("no free spot for a target"))?;
    let speed = pick(rng, config.speed);
    let dirs = [
        (1, 0),
        (-1, 0),
        (0, 1),
        (0, -1),
        (1, 1),
        (1, -1),
        (-1, 1),
        (-1, -1),
    ];
    let (dx, dy) = *dirs.choose(rng).expect("non-empty");
    let total: f64 = config.motion_mix.iter().sum();
    let u = rng.gen::<f64>() * total;
    let motion = if u < config.motion_mix[0] {
        Motion::Constant
    } else if u < config.motion_mix[0] + config.motion_mix[1] {
        Motion::Turning
    } else {
        Motion::StopAndGo
    };
    Ok(simulate(config, rng, start, (dx * speed, dy * speed), motion))
}

fn simulate(
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    start: Rect,
    velocity: (i32, i32),
    motion: Motion,
) -> Vec<Rect> {
    let (x0, y0, x1, y1) = config.usable();
    let (mut vx, mut vy) = velocity;
    let mut paused = false;
    let mut r = start;
    let mut path = Vec::with_capacity(config.length);
    path.push(r);
    for _ in 1..config.length {
        match motion {
            Motion::Constant => {}
            Motion::Turning => {
                if rng.gen_bool(0.2) {
                    (vx, vy) = if rng.gen_bool(0.5) { (-vy, vx) } else { (vy, -vx) };
                }
            }
            Motion::StopAndGo => {
                if rng.gen_bool(0.25) {
                    paused = !paused;
                }
            }
        }
        if !paused {
            if r.x + vx < x0 || r.x + r.w + vx > x1 {
                vx = -vx;
            }
            if r.y + vy < y0 || r.y + r.h + vy > y1 {
                vy = -vy;
            }
            r.x = (r.x + vx).clamp(x0, x1 - r.w);
            r.y = (r.y + vy).clamp(y0, y1 - r.h);
        }
        path.push(r);
    }
    path
}

/// Scripted containment: a container approaches a resting target, covers it,
/// carries it a few pixels, then moves off and reveals it.
fn carry_script(
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    size: i32,
    occupied: &[Rect],
    statics: &[Rect],
) -> Result<(Vec<Rect>, Vec<Rect>)> {
    let (x0, y0, x1, y1) = config.usable();
    let cs = config.container_size as i32;
    if cs < size {
        return Err(infeasible("container smaller than target"));
    }
    let off = (cs - size) / 2;
    let dirs = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    let inside = |r: &Rect| r.x >= x0 && r.y >= y0 && r.x + r.w <= x1 && r.y + r.h <= y1;

    for _ in 0..100 {
        let target = Rect {
            x: rng.gen_range(x0..=(x1 - size).max(x0)),
            y: rng.gen_range(y0..=(y1 - size).max(y0)),
            w: size,
            h: size,
        };
        let cover = Rect {
            x: target.x - off,
            y: target.y - off,
            w: cs,
            h: cs,
        };
        let approach = *dirs.choose(rng).expect("non-empty");
        let carry_dir = *dirs.choose(rng).expect("non-empty");
        let leave_dir = *dirs.choose(rng).expect("non-empty");
        let carry_len = pick(rng, config.carry_distance);
        let approach_len = cs + 1;
        let leave_len = cs + 1;
        let start = cover.moved(-approach.0 * approach_len, -approach.1 * approach_len);
        let drop = cover.moved(carry_dir.0 * carry_len, carry_dir.1 * carry_len);
        let gone = drop.moved(leave_dir.0 * leave_len, leave_dir.1 * leave_len);
        if leave_dir == (-carry_dir.0, -carry_dir.1) {
            continue;
        }
        if ![start, cover, drop, gone].iter().all(inside) {
            continue;
        }
        if occupied
            .iter()
            .chain(statics)
            .any(|o| o.overlaps(&target) || o.overlaps(&start))
        {
            continue;
        }
        let delay = rng.gen_range(0..=2);
        let pause = rng.gen_range(0..=1);
        let mut tp = Vec::with_capacity(config.length);
        let mut cp = Vec::with_capacity(config.length);
        let (mut t_rect, mut c_rect) = (target, start);
        for t in 0..config.length as i32 {
            let phase = t - delay;
            if phase > 0 && phase <= approach_len {
                c_rect = c_rect.moved(approach.0, approach.1);
            } else if phase > approach_len && phase <= approach_len + carry_len {
                c_rect = c_rect.moved(carry_dir.0, carry_dir.1);
                t_rect = t_rect.moved(carry_dir.0, carry_dir.1);
            } else if phase > approach_len + carry_len + pause
                && phase <= approach_len + carry_len + pause + leave_len
            {
                c_rect = c_rect.moved(leave_dir.0, leave_dir.1);
            }
            tp.push(t_rect);
            cp.push(c_rect);
        }
        return Ok((tp, cp));
    }
    Err(infeasible("no room for a carrying episode"))
}

fn realize(config: &ScenarioConfig, seed: u64, layout: &Layout) -> SceneSequence {
    let (h, w) = (config.height, config.width);
    let n = layout.layers.len();
    let mut frames = Vec::with_capacity(config.length);
    let mut tracks: Vec<ObjectTrack> = (0..layout.targets)
        .map(|i| ObjectTrack {
            object_id: i as u32,
            entries: Vec::with_capacity(config.length),
        })
        .collect();
    for t in 0..config.length {
        let (dx, dy) = layout.camera[t];
        let mut frame = vec![0.0; CHANNELS * h * w];
        let mut owner = vec![usize::MAX; h * w];
        for k in 0..n {
            let r = layout.rects[k][t].moved(-dx, -dy);
            let ch = layout.layers[k].channel();
            for y in r.y.max(0)..(r.y + r.h).min(h as i32) {
                for x in r.x.max(0)..(r.x + r.w).min(w as i32) {
                    let p = y as usize * w + x as usize;
                    owner[p] = k;
                    for c in 0..3 {
                        frame[c * h * w + p] = if c == ch { 1.0 } else { 0.0 };
                    }
                    frame[3 * h * w + p] = layout.intensity[k];
                }
            }
        }
        frames.push(Tensor::new(&[CHANNELS, h, w], frame).expect("frame shape"));

        for (i, track) in tracks.iter_mut().enumerate() {
            let r = layout.rects[i][t].moved(-dx, -dy);
            let bbox = r.to_bbox(0, 0);
            let state = classify(config, layout, &owner, i, t, r);
            track.entries.push(Some(TrackEntry {
                center: bbox.center(),
                bbox,
                state,
            }));
        }
    }
    let props = (layout.targets..n)
        .map(|k| Prop {
            kind: match layout.layers[k] {
                Layer::Container => PropKind::Container,
                _ => PropKind::Wall,
            },
            boxes: (0..config.length)
                .map(|t| {
                    let (dx, dy) = layout.camera[t];
                    layout.rects[k][t].to_bbox(dx, dy)
                })
                .collect(),
        })
        .collect();
    SceneSequence {
        frames,
        tracks,
        props,
        seed,
        config: config.clone(),
    }
}

fn classify(
    config: &ScenarioConfig,
    layout: &Layout,
    owner: &[usize],
    i: usize,
    t: usize,
    r: Rect,
) -> VisibilityState {
    let (h, w) = (config.height as i32, config.width as i32);
    let area = (r.w * r.h) as f64;
    let mut cover_counts = vec![0usize; layout.layers.len()];
    let mut covered = 0usize;
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let o = owner[(y * w + x) as usize];
            if o != i {
                covered += 1;
                cover_counts[o] += 1;
            }
        }
    }
    if (covered as f64) < config.coverage_threshold * area {
        return VisibilityState::Visible;
    }
    let mut top = 0;
    for (k, &c) in cover_counts.iter().enumerate() {
        if c > cover_counts[top] {
            top = k;
        }
    }
    if layout.layers[top] != Layer::Container {
        return VisibilityState::Occluded;
    }
    let (dx, dy) = layout.camera[t];
    let cont = layout.rects[top][t].moved(-dx, -dy);
    if !cont.to_bbox(0, 0).encloses(&r.to_bbox(0, 0)) {
        return VisibilityState::Occluded;
    }
    let moved = t > 0 && {
        let prev = layout.rects[top][t - 1];
        let now = layout.rects[top][t];
        (prev.x - now.x).abs() + (prev.y - now.y).abs() >= 1
    };
    if moved {
        VisibilityState::Carried
    } else {
        VisibilityState::Contained
    }
}

/// Hand-authored scene: per-frame boxes of each target and each prop, in
/// back-to-front order (targets first, then props as listed).
#[derive(Clone, Debug, Default)]
pub struct Script {
    pub targets: Vec<Vec<BBox>>,
    pub props: Vec<Prop>,
}

/// Renders and labels a [`Script`] with the same painter and coverage rules
/// as [`generate_sequence`]. Box coordinates are rounded to whole pixels.
pub fn render_script(config: &ScenarioConfig, script: &Script, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let t_len = config.length;
    let to_rect = |b: &BBox| Rect {
        x: b.x.round() as i32,
        y: b.y.round() as i32,
        w: b.w.round() as i32,
        h: b.h.round() as i32,
    };
    let mut layers = Vec::new();
    let mut intensity = Vec::new();
    let mut rects = Vec::new();
    for (i, path) in script.targets.iter().enumerate() {
        if path.len() != t_len {
            return Err(Error::invalid(
                "render_script",
                format!("target {i} has {} frames, expected {t_len}", path.len()),
            ));
        }
        layers.push(Layer::Target);
        intensity.push(1.0 - 0.2 * (i % 3) as f64);
        rects.push(path.iter().map(to_rect).collect());
    }
    for (k, prop) in script.props.iter().enumerate() {
        if prop.boxes.len() != t_len {
            return Err(Error::invalid(
                "render_script",
                format!("prop {k} has {} frames, expected {t_len}", prop.boxes.len()),
            ));
        }
        let (layer, value) = match prop.kind {
            PropKind::Wall => (Layer::Wall, 0.6),
            PropKind::Container => (Layer::Container, 0.8),
        };
        layers.push(layer);
        intensity.push(value);
        rects.push(prop.boxes.iter().map(to_rect).collect());
    }
    let layout = Layout {
        layers,
        intensity,
        rects,
        camera: vec![(0, 0); t_len],
        targets: script.targets.len(),
    };
    Ok(realize(config, seed, &layout))
}
