//! Frame rendering with walker-belief overlays, written as binary PPM.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::tracker::{TrackRecord, WalkerSnapshot};
use crate::walk::Grid;
use crate::worldgen::BBox;

pub type Rgb = [u8; 3];

const TARGET: Rgb = [220, 70, 60];
const WALL: Rgb = [110, 110, 110];
const CONTAINER: Rgb = [160, 110, 40];
const BELIEF: Rgb = [40, 130, 255];
const GT_BOX: Rgb = [60, 220, 90];
const VISIBLE_BOX: Rgb = [250, 230, 40];
const HIDDEN_BOX: Rgb = [240, 60, 240];
const MARKER: Rgb = [255, 255, 255];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = y as usize * self.width + x as usize;
            self.pixels[i] = c;
        }
    }

    fn outline(&mut self, b: &BBox, scale: f64, c: Rgb) {
        let x0 = (b.x * scale).round() as i64;
        let y0 = (b.y * scale).round() as i64;
        let x1 = ((b.x + b.w) * scale).round() as i64 - 1;
        let y1 = ((b.y + b.h) * scale).round() as i64 - 1;
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
    }

    /// Binary PPM (`P6`) bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(3 * self.pixels.len());
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_ppm())
    }
}

fn shade(c: Rgb, v: f64) -> Rgb {
    let v = v.clamp(0.0, 1.0);
    c.map(|x| (x as f64 * (0.4 + 0.6 * v)).round() as u8)
}

fn blend(a: Rgb, b: Rgb, alpha: f64) -> Rgb {
    let mut out = [0; 3];
    for k in 0..3 {
        out[k] = (a[k] as f64 * (1.0 - alpha) + b[k] as f64 * alpha).round() as u8;
    }
    out
}

/// What to draw on top of one frame.
pub struct Overlay<'a> {
    pub walkers: &'a [&'a WalkerSnapshot],
    pub grid: Grid,
    /// Frame pixels per node cell.
    pub node_scale: f64,
    pub threshold: f64,
    pub gt: &'a [BBox],
    pub predicted: &'a [&'a TrackRecord],
}

/// Renders a `[4, H, W]` frame at `scale` output pixels per frame pixel.
///
/// Each node whose belief exceeds the threshold is tinted, with stronger
/// tint for larger mass; the belief argmax gets a center marker. Ground-truth
/// boxes are drawn before predicted ones.
pub fn render_frame(frame: &Tensor, overlay: &Overlay<'_>, scale: usize) -> Result<Image> {
    let s = frame.shape();
    if s.len() != 3 || s[0] < 3 {
        return Err(Error::invalid("render_frame", format!("expected a [4, H, W] frame, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut img = Image::new(w * scale, h * scale);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let lum = d.get(3 * h * w + p).copied().unwrap_or(1.0);
            let c = if d[p] > 0.5 {
                shade(TARGET, lum)
            } else if d[h * w + p] > 0.5 {
                shade(WALL, lum)
            } else if d[2 * h * w + p] > 0.5 {
                shade(CONTAINER, lum)
            } else {
                [0; 3]
            };
            for yy in 0..scale {
                for xx in 0..scale {
                    img.pixels[(y * scale + yy) * img.width + x * scale + xx] = c;
                }
            }
        }
    }

    let px = overlay.node_scale * scale as f64;
    let (iw, ih) = (img.width, img.height);
    let node_rect = |node: usize| {
        let (r, c) = overlay.grid.coords(node);
        let x0 = (c as f64 * px).round() as usize;
        let y0 = (r as f64 * px).round() as usize;
        let x1 = (((c + 1) as f64 * px).round() as usize).min(iw);
        let y1 = (((r + 1) as f64 * px).round() as usize).min(ih);
        (x0, y0, x1, y1)
    };
    for wk in overlay.walkers {
        let peak = wk.belief.iter().copied().fold(0.0, f64::max);
        for (node, &b) in wk.belief.iter().enumerate() {
            if b <= overlay.threshold {
                continue;
            }
            let alpha = 0.35 + 0.5 * b / peak;
            let (x0, y0, x1, y1) = node_rect(node);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * img.width + x;
                    img.pixels[i] = blend(img.pixels[i], BELIEF, alpha);
                }
            }
        }
        let (x0, y0, x1, y1) = node_rect(wk.argmax);
        let (cx, cy) = (((x0 + x1) / 2) as i64, ((y0 + y1) / 2) as i64);
        for k in -1..=1 {
            img.put(cx + k, cy, MARKER);
            img.put(cx, cy + k, MARKER);
        }
    }

    let sc = scale as f64;
    for b in overlay.gt {
        img.outline(b, sc, GT_BOX);
    }
    for r in overlay.predicted {
        img.outline(&r.bbox, sc, if r.visible { VISIBLE_BOX } else { HIDDEN_BOX });
    }
    Ok(img)
}
