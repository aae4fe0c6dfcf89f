//! Versioned binary encoding of sequences and datasets.
//!
//! A dataset file is `"RAMWDSET"`, a `u32` version, a `u32` sequence count,
//! then each sequence as a `u64` byte length followed by its encoding.
//! Redacted entries are stored as a zero tag byte.

use std::path::Path;

use super::scene::{
    BBox, ObjectTrack, Prop, PropKind, SceneSequence, TrackEntry, VisibilityState,
};
use super::ScenarioConfig;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const SEQUENCE_MAGIC: &[u8; 8] = b"RAMWSEQ_";
pub const DATASET_MAGIC: &[u8; 8] = b"RAMWDSET";
pub const FORMAT_VERSION: u32 = 1;

fn put_box(w: &mut ByteWriter, b: &BBox) {
    for v in [b.x, b.y, b.w, b.h] {
        w.f64(v);
    }
}

fn get_box(r: &mut ByteReader<'_>) -> Result<BBox> {
    Ok(BBox::new(
        r.f64("box")?,
        r.f64("box")?,
        r.f64("box")?,
        r.f64("box")?,
    ))
}

fn check_header(r: &mut ByteReader<'_>, magic: &[u8; 8], what: &'static str) -> Result<()> {
    if r.take(8, what)? != magic {
        return Err(Error::Magic(what));
    }
    let version = r.u32(what)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

pub fn serialize(seq: &SceneSequence) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(SEQUENCE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(seq.seed);
    w.str(&serde_json::to_string(&seq.config).expect("config serializes"));
    let shape = seq.frames.first().map(|f| f.shape().to_vec()).unwrap_or(vec![0, 0, 0]);
    w.u32(seq.frames.len() as u32);
    for &d in &shape {
        w.u32(d as u32);
    }
    for f in &seq.frames {
        for &v in f.data() {
            w.f64(v);
        }
    }
    w.u32(seq.props.len() as u32);
    for p in &seq.props {
        w.u8(match p.kind {
            PropKind::Wall => 0,
            PropKind::Container => 1,
        });
        w.u32(p.boxes.len() as u32);
        for b in &p.boxes {
            put_box(&mut w, b);
        }
    }
    w.u32(seq.tracks.len() as u32);
    for t in &seq.tracks {
        w.u32(t.object_id);
        w.u32(t.entries.len() as u32);
        for e in &t.entries {
            match e {
                None => w.u8(0),
                Some(e) => {
                    w.u8(1);
                    w.f64(e.center.0);
                    w.f64(e.center.1);
                    put_box(&mut w, &e.bbox);
                    w.u8(e.state as u8);
                }
            }
        }
    }
    w.into_inner()
}

pub fn deserialize(bytes: &[u8]) -> Result<SceneSequence> {
    let mut r = ByteReader::new(bytes);
    let seq = read_sequence(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after sequence",
            r.remaining()
        )));
    }
    Ok(seq)
}

fn read_sequence(r: &mut ByteReader<'_>) -> Result<SceneSequence> {
    check_header(r, SEQUENCE_MAGIC, "sequence header")?;
    let seed = r.u64("seed")?;
    let config: ScenarioConfig = serde_json::from_str(&r.string("config")?)
        .map_err(|e| Error::Corrupt(format!("config snapshot: {e}")))?;
    let n_frames = r.u32("frame count")? as usize;
    let shape = [
        r.u32("frame shape")? as usize,
        r.u32("frame shape")? as usize,
        r.u32("frame shape")? as usize,
    ];
    let numel: usize = shape.iter().product();
    let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
    for _ in 0..n_frames {
        let data = (0..numel)
            .map(|_| r.f64("frame data"))
            .collect::<Result<Vec<_>>>()?;
        frames.push(Tensor::new(&shape, data)?);
    }
    let n_props = r.u32("prop count")? as usize;
    let mut props = Vec::with_capacity(n_props.min(1 << 10));
    for _ in 0..n_props {
        let kind = match r.u8("prop kind")? {
            0 => PropKind::Wall,
            1 => PropKind::Container,
            k => return Err(Error::Corrupt(format!("unknown prop kind {k}"))),
        };
        let n = r.u32("prop length")? as usize;
        let boxes = (0..n).map(|_| get_box(r)).collect::<Result<Vec<_>>>()?;
        props.push(Prop { kind, boxes });
    }
    let n_tracks = r.u32("track count")? as usize;
    let mut tracks = Vec::with_capacity(n_tracks.min(1 << 10));
    for _ in 0..n_tracks {
        let object_id = r.u32("object id")?;
        let n = r.u32("track length")? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            entries.push(match r.u8("entry tag")? {
                0 => None,
                1 => {
                    let center = (r.f64("center")?, r.f64("center")?);
                    let bbox = get_box(r)?;
                    let s = r.u8("state")?;
                    let state = VisibilityState::from_u8(s)
                        .ok_or_else(|| Error::Corrupt(format!("unknown visibility state {s}")))?;
                    Some(TrackEntry {
                        center,
                        bbox,
                        state,
                    })
                }
                tag => return Err(Error::Corrupt(format!("unknown entry tag {tag}"))),
            });
        }
        tracks.push(ObjectTrack { object_id, entries });
    }
    Ok(SceneSequence {
        frames,
        tracks,
        props,
        seed,
        config,
    })
}

pub fn encode_dataset(seqs: &[SceneSequence]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(seqs.len() as u32);
    for s in seqs {
        let b = serialize(s);
        w.u64(b.len() as u64);
        w.bytes(&b);
    }
    w.into_inner()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSequence>> {
    let mut r = ByteReader::new(bytes);
    check_header(&mut r, DATASET_MAGIC, "dataset header")?;
    let n = r.u32("dataset count")? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u64("sequence length")? as usize;
        out.push(deserialize(r.take(len, "sequence body")?)?);
    }
    if !r.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after dataset",
            r.remaining()
        )));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, seqs: &[SceneSequence]) -> Result<()> {
    crate::io::write_atomic(path, &encode_dataset(seqs))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSequence>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Plain-text sidecar: one line per sequence with its seed and per-state
/// labeled frame counts, followed by a totals line.
pub fn dataset_manifest(seqs: &[SceneSequence]) -> String {
    let mut out = String::from("# index seed visible occluded contained carried\n");
    let mut total = [0usize; 4];
    for (i, s) in seqs.iter().enumerate() {
        let c = s.state_counts();
        for k in 0..4 {
            total[k] += c[k];
        }
        out.push_str(&format!(
            "{i} {} {} {} {} {}\n",
            s.seed, c[0], c[1], c[2], c[3]
        ));
    }
    out.push_str(&format!(
        "total {} {} {} {} {}\n",
        seqs.len(),
        total[0],
        total[1],
        total[2],
        total[3]
    ));
    out
}
