//! Plain-text track files.
//!
//! One record per line: `frame id x y w h confidence visibility`, fields
//! separated by single spaces, `visibility` either `visible` or
//! `hypothesized`. Lines starting with `#` are comments. Numbers use the
//! shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::worldgen::BBox;

pub const TRACKS_HEADER: &str = "# frame id x y w h confidence visibility";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u32,
    pub bbox: BBox,
    pub confidence: f64,
    pub visible: bool,
}

pub fn render_tracks(records: &[TrackRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(TRACKS_HEADER);
    s.push('\n');
    for r in records {
        let b = r.bbox;
        let flag = if r.visible { "visible" } else { "hypothesized" };
        writeln!(
            s,
            "{} {} {:?} {:?} {:?} {:?} {:?} {flag}",
            r.frame, r.id, b.x, b.y, b.w, b.h, r.confidence
        )
        .expect("string write");
    }
    s
}

pub fn parse_tracks(text: &str) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Corrupt(format!("track line {}: {what}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad("bad number"));
        out.push(TrackRecord {
            frame: f[0].parse().map_err(|_| bad("bad frame"))?,
            id: f[1].parse().map_err(|_| bad("bad id"))?,
            bbox: BBox::new(num(2)?, num(3)?, num(4)?, num(5)?),
            confidence: num(6)?,
            visible: match f[7] {
                "visible" => true,
                "hypothesized" => false,
                _ => return Err(bad("bad visibility flag")),
            },
        });
    }
    Ok(out)
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    crate::io::write_atomic(path, render_tracks(records).as_bytes())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    parse_tracks(&std::fs::read_to_string(path)?)
}
