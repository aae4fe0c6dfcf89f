//! Python bindings: dataset generation, training, tracking, evaluation,
//! and the random-walk primitives.
//!
//! Configs are passed as TOML text in the same layout as the CLI config
//! file. Tensors cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ramwalk::config::RunConfig;
use ramwalk::metrics;
use ramwalk::model;
use ramwalk::tracker::{self, TrackRecord};
use ramwalk::trainer;
use ramwalk::walk::{self, TransitionMatrix};
use ramwalk::worldgen::{self, SceneSequence};

fn err(e: ramwalk::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(text: Option<&str>) -> PyResult<RunConfig> {
    RunConfig::parse(text.unwrap_or("")).map_err(err)
}

#[pyclass(name = "Sequence", frozen)]
struct PySequence {
    inner: SceneSequence,
}

#[pymethods]
impl PySequence {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// `(channels, height, width)`.
    #[getter]
    fn frame_shape(&self) -> Vec<usize> {
        self.inner.frames.first().map(|f| f.shape().to_vec()).unwrap_or_default()
    }

    /// Flat row-major pixels of frame `t`.
    fn frame(&self, t: usize) -> PyResult<Vec<f64>> {
        self.inner
            .frames
            .get(t)
            .map(|f| f.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("frame {t} out of range")))
    }

    /// Labeled frame counts: visible, occluded, contained, carried.
    fn state_counts(&self) -> Vec<usize> {
        self.inner.state_counts().to_vec()
    }

    /// One list per object of `(frame, x, y, w, h, state)`; redacted
    /// entries are skipped.
    fn labels(&self) -> Vec<Vec<(usize, f64, f64, f64, f64, &'static str)>> {
        self.inner
            .tracks
            .iter()
            .map(|tr| {
                tr.entries
                    .iter()
                    .enumerate()
                    .filter_map(|(t, e)| {
                        let e = e.as_ref()?;
                        let b = e.bbox;
                        Some((t, b.x, b.y, b.w, b.h, e.state.name()))
                    })
                    .collect()
            })
            .collect()
    }

    fn redacted(&self) -> PySequence {
        PySequence {
            inner: self.inner.redacted(),
        }
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model from the `[model]` section of `config`.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg = self::config(config)?;
        Ok(Self {
            inner: model::Model::new(cfg.model).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = self::config(config)?;
        Ok(Self {
            inner: trainer::load_checkpoint(&path, &cfg.model).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&path, &self.inner).map_err(err)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Per frame: `(heatmap, height, width)` of the center heatmap.
    fn heatmaps(&self, seq: &PySequence) -> PyResult<Vec<(Vec<f64>, usize, usize)>> {
        let outs = self.inner.infer(&seq.inner.frames).map_err(err)?;
        Ok(outs
            .into_iter()
            .map(|o| {
                let s = o.heatmap.shape().to_vec();
                (o.heatmap.data().to_vec(), s[0], s[1])
            })
            .collect())
    }
}

#[pyfunction]
#[pyo3(signature = (count, seed=0, config=None))]
fn generate(count: usize, seed: u64, config: Option<&str>) -> PyResult<Vec<PySequence>> {
    let cfg = self::config(config)?;
    let seqs = worldgen::generate_many(&cfg.world, seed, count).map_err(err)?;
    Ok(seqs.into_iter().map(|inner| PySequence { inner }).collect())
}

/// Trains a model; returns it with the per-epoch log as dicts.
#[pyfunction]
#[pyo3(signature = (sequences, config=None))]
fn train<'py>(
    py: Python<'py>,
    sequences: Vec<PyRef<'py, PySequence>>,
    config: Option<&str>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = self::config(config)?;
    let data: Vec<SceneSequence> = sequences.iter().map(|s| s.inner.clone()).collect();
    let out = trainer::train(&data, &cfg.model, &cfg.train).map_err(err)?;
    let mut log = Vec::with_capacity(out.log.len());
    for r in &out.log {
        let d = PyDict::new(py);
        d.set_item("phase", &r.phase)?;
        d.set_item("epoch", r.epoch)?;
        d.set_item("loss_vis", r.loss_vis)?;
        d.set_item("loss_ram", r.loss_ram)?;
        d.set_item("loss_over", r.loss_over)?;
        d.set_item("loss_total", r.loss_total)?;
        log.push(d);
    }
    Ok((PyModel { inner: out.model }, log))
}

type Record = (usize, u32, f64, f64, f64, f64, f64, bool);

fn to_tuple(r: &TrackRecord) -> Record {
    let b = r.bbox;
    (r.frame, r.id, b.x, b.y, b.w, b.h, r.confidence, r.visible)
}

fn from_tuple(t: &Record) -> TrackRecord {
    TrackRecord {
        frame: t.0,
        id: t.1,
        bbox: worldgen::BBox::new(t.2, t.3, t.4, t.5),
        confidence: t.6,
        visible: t.7,
    }
}

/// Track records `(frame, id, x, y, w, h, confidence, visible)`.
#[pyfunction]
#[pyo3(signature = (model, sequence, config=None))]
fn track(model: &PyModel, sequence: &PySequence, config: Option<&str>) -> PyResult<Vec<Record>> {
    let cfg = self::config(config)?;
    let out = tracker::track_sequence(&model.inner, &sequence.inner, &cfg.tracker).map_err(err)?;
    Ok(out.records.iter().map(to_tuple).collect())
}

/// Scores track records against sequences; returns the report as a dict
/// keyed by state name plus identity statistics.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    tracks: Vec<Vec<Record>>,
    sequences: Vec<PyRef<'py, PySequence>>,
) -> PyResult<Bound<'py, PyDict>> {
    let preds: Vec<Vec<TrackRecord>> = tracks.iter().map(|t| t.iter().map(from_tuple).collect()).collect();
    let gt: Vec<SceneSequence> = sequences.iter().map(|s| s.inner.clone()).collect();
    let r = metrics::evaluate_dataset(&preds, &gt).map_err(err)?;
    let d = PyDict::new(py);
    for s in worldgen::VisibilityState::ALL {
        let st = PyDict::new(py);
        st.set_item("frames", r.states[s.index()].frames)?;
        st.set_item("mean_iou", r.mean_iou(s))?;
        st.set_item("map", r.map(s))?;
        d.set_item(s.name(), st)?;
    }
    d.set_item("episodes", r.episodes)?;
    d.set_item("recovered", r.recovered)?;
    d.set_item("recovery_rate", r.recovery_rate())?;
    d.set_item("id_switches", r.id_switches)?;
    d.set_item("table", metrics::render_table(&r))?;
    Ok(d)
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    metrics::iou(
        &worldgen::BBox::new(a.0, a.1, a.2, a.3),
        &worldgen::BBox::new(b.0, b.1, b.2, b.3),
    )
}

fn embeddings(rows: Vec<Vec<f64>>) -> PyResult<ramwalk::diffcore::Tensor> {
    let m = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged embedding rows"));
    }
    ramwalk::diffcore::Tensor::new(&[m, d], rows.concat()).map_err(err)
}

/// Dense row-stochastic transition between two node-embedding sets.
#[pyfunction]
#[pyo3(signature = (q_t, q_next, tau=0.1))]
fn affinity(q_t: Vec<Vec<f64>>, q_next: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let a = walk::affinity_global(&embeddings(q_t)?, &embeddings(q_next)?, tau).map_err(err)?;
    let n = a.nodes();
    let dense = a.to_dense().data().to_vec();
    Ok(dense.chunks(n).map(<[f64]>::to_vec).collect())
}

/// Walker states `X^0..X^n` for a chain of dense transitions.
#[pyfunction]
fn rollout(x0: Vec<f64>, transitions: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let mats = transitions
        .into_iter()
        .map(|rows| {
            let n = rows.len();
            TransitionMatrix::dense(n, rows.concat()).map_err(err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    walk::rollout(&x0, &mats).map_err(err)
}

#[pymodule]
fn ramwalk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(affinity, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    Ok(())
}
