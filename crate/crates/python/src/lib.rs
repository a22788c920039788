//! Python bindings. Tensors cross the boundary as nested lists laid out
//! `[frame][channel][row][column]`; numpy arrays convert with `tolist()`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use residprop::flow::{self, FlowField};
use residprop::kalman::{self, GainModel as CoreGain, Variant};
use residprop::motion::{self, FitConfig};
use residprop::synth::{self, DatasetManifest, SceneSpec};
use residprop::tensor::compute_residuals;
use residprop::{Error, FeatureSequence, FeatureTensor, Kernel, Plane};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Grid = Vec<Vec<f64>>;

fn tensor_from(channels: Vec<Grid>) -> PyResult<FeatureTensor> {
    let c = channels.len();
    let h = channels.first().map_or(0, Vec::len);
    let w = channels.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(c * w * h);
    for plane in &channels {
        if plane.len() != h || plane.iter().any(|row| row.len() != w) {
            return Err(PyValueError::new_err("ragged tensor"));
        }
        data.extend(plane.iter().flatten());
    }
    FeatureTensor::from_vec(c, w, h, data).map_err(py_err)
}

fn tensor_to(t: &FeatureTensor) -> Vec<Grid> {
    (0..t.channels()).map(|c| plane_to(&t.plane(c))).collect()
}

fn plane_from(rows: Grid) -> PyResult<Plane> {
    let (h, w) = (rows.len(), rows.first().map_or(0, Vec::len));
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged plane"));
    }
    Plane::from_vec(w, h, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn plane_to(p: &Plane) -> Grid {
    p.as_slice().chunks(p.width()).map(<[f64]>::to_vec).collect()
}

fn kernel_to(k: &Kernel) -> Grid {
    k.weights().chunks(k.size()).map(<[f64]>::to_vec).collect()
}

fn fit_config(max_iters: Option<usize>, window: Option<usize>) -> FitConfig {
    let mut cfg = FitConfig::default();
    if let Some(n) = max_iters {
        cfg.max_iters = n;
    }
    if let Some(w) = window {
        cfg.window = w;
    }
    cfg
}

/// A feature sequence of `T` frames, each `C×H×W`.
#[pyclass(name = "Sequence", module = "residprop_py", from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: FeatureSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    fn new(frames: Vec<Vec<Grid>>) -> PyResult<Self> {
        let frames = frames.into_iter().map(tensor_from).collect::<PyResult<Vec<_>>>()?;
        Ok(PySequence {
            inner: FeatureSequence::new(frames).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySequence {
            inner: synth::load_sequence(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synth::save_sequence(&path, &self.inner).map_err(py_err)
    }

    /// `(T, C, H, W)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let (c, w, h) = self.inner.shape();
        (self.inner.len(), c, h, w)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<Grid>> {
        self.inner
            .frames()
            .get(t)
            .map(tensor_to)
            .ok_or_else(|| PyValueError::new_err(format!("frame {t} of {}", self.inner.len())))
    }

    fn tolist(&self) -> Vec<Vec<Grid>> {
        self.inner.frames().iter().map(tensor_to).collect()
    }

    fn prefix(&self, len: usize) -> PyResult<Self> {
        Ok(PySequence {
            inner: self.inner.prefix(len).map_err(py_err)?,
        })
    }

    /// Frame-to-frame differences, one fewer than the frames.
    fn residuals(&self) -> PyResult<Vec<Vec<Grid>>> {
        let r = compute_residuals(&self.inner).map_err(py_err)?;
        Ok(r.residuals().iter().map(tensor_to).collect())
    }

    fn __repr__(&self) -> String {
        let (t, c, h, w) = self.shape();
        format!("Sequence(T={t}, C={c}, H={h}, W={w})")
    }
}

/// Learned gain parameters; `variant` is "KF" or "KF2".
#[pyclass(name = "GainModel", module = "residprop_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGainModel {
    inner: CoreGain,
}

#[pymethods]
impl PyGainModel {
    #[new]
    #[pyo3(signature = (variant, params=None, window=kalman::DEFAULT_POOL_WINDOW))]
    fn new(variant: &str, params: Option<Vec<f64>>, window: usize) -> PyResult<Self> {
        let variant = match variant {
            "KF" => Variant::KF,
            "KF2" => Variant::KF2,
            v => return Err(PyValueError::new_err(format!("unknown variant {v:?}"))),
        };
        let params = params.unwrap_or_else(|| vec![0.0; variant.param_count()]);
        Ok(PyGainModel {
            inner: CoreGain::new(variant, params, window).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyGainModel {
            inner: CoreGain::from_json(s).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        match self.inner.variant {
            Variant::KF => "KF",
            Variant::KF2 => "KF2",
        }
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params.clone()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }

    /// Per-pixel gain map from the previous measurement and prediction.
    fn gain(&self, z_prev: Vec<Grid>, dhat_prev: Vec<Grid>) -> PyResult<Grid> {
        let g = kalman::gain(&self.inner, &tensor_from(z_prev)?, &tensor_from(dhat_prev)?).map_err(py_err)?;
        Ok(plane_to(&g))
    }

    /// Fine-tunes on `(measured, truth)` sequence pairs and returns the new model.
    #[pyo3(signature = (pairs, rounds=3, steps_per_round=40, max_iters=None))]
    fn fine_tune(
        &self,
        pairs: Vec<(PySequence, PySequence)>,
        rounds: usize,
        steps_per_round: usize,
        max_iters: Option<usize>,
    ) -> PyResult<Self> {
        let samples: Vec<kalman::TuneSample> = pairs
            .into_iter()
            .map(|(m, t)| kalman::TuneSample {
                measured: m.inner,
                truth: t.inner,
            })
            .collect();
        let tune = kalman::TuneConfig {
            rounds,
            steps_per_round,
            ..kalman::TuneConfig::default()
        };
        let out = kalman::fine_tune(&self.inner, &samples, &tune, &fit_config(max_iters, None)).map_err(py_err)?;
        Ok(PyGainModel { inner: out.model })
    }

    fn __repr__(&self) -> String {
        self.inner.to_json()
    }
}

/// Rolls `observed` forward `horizon` frames. Returns the predicted frames
/// and, per step, the fitted kernels as `[channel][size]` grids.
#[pyfunction]
#[pyo3(signature = (observed, horizon, max_iters=None, window=None))]
fn rollout(
    observed: &PySequence,
    horizon: usize,
    max_iters: Option<usize>,
    window: Option<usize>,
) -> PyResult<(Vec<Vec<Grid>>, Vec<Vec<Vec<Grid>>>)> {
    let res = motion::rollout(&observed.inner, horizon, &fit_config(max_iters, window)).map_err(py_err)?;
    let frames = res.features.iter().map(tensor_to).collect();
    let kernels = res
        .kernels
        .iter()
        .map(|ks| (0..ks.channels()).map(|c| ks.kernels(c).iter().map(kernel_to).collect()).collect())
        .collect();
    Ok((frames, kernels))
}

/// Filtered rollout at observation ratio `g`. Returns the predicted frames
/// and a dict with the update steps and their mean gains.
#[pyfunction]
#[pyo3(signature = (seq, g, model, max_iters=None))]
fn filtered_rollout<'py>(
    py: Python<'py>,
    seq: &PySequence,
    g: f64,
    model: &PyGainModel,
    max_iters: Option<usize>,
) -> PyResult<(Vec<Vec<Grid>>, Bound<'py, PyDict>)> {
    let (res, trace) =
        kalman::filtered_rollout(&seq.inner, g, &fit_config(max_iters, None), &model.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("steps", trace.steps)?;
    d.set_item("mean_gain", trace.mean_gain)?;
    d.set_item("update_norm", trace.update_norm)?;
    Ok((res.features.iter().map(tensor_to).collect(), d))
}

/// Block-matching flow from plane `a` to plane `b`, as `(u, v)` grids.
#[pyfunction]
#[pyo3(signature = (a, b, radius=flow::DEFAULT_RADIUS, patch=flow::DEFAULT_PATCH))]
fn estimate_flow(a: Grid, b: Grid, radius: usize, patch: usize) -> PyResult<(Grid, Grid)> {
    let f = flow::estimate_flow_with_patch(&plane_from(a)?, &plane_from(b)?, radius, patch).map_err(py_err)?;
    Ok((plane_to(&f.u), plane_to(&f.v)))
}

/// Flow kernels of each size from a `(u, v)` field.
#[pyfunction]
#[pyo3(signature = (u, v, sizes=vec![3, 5, 7], sigma=flow::DEFAULT_SIGMA))]
fn flow_kernels(u: Grid, v: Grid, sizes: Vec<usize>, sigma: f64) -> PyResult<Vec<Grid>> {
    let f = FlowField {
        u: plane_from(u)?,
        v: plane_from(v)?,
    };
    let ks = flow::flow_to_kernels(&f, &sizes, sigma).map_err(py_err)?;
    Ok(ks.iter().map(kernel_to).collect())
}

/// Median, quartiles and 10th/90th percentiles of match scores.
#[pyfunction]
fn match_statistics(py: Python<'_>, scores: Vec<f64>) -> PyResult<Bound<'_, PyDict>> {
    let s = flow::match_statistics(&scores).map_err(py_err)?;
    let d = PyDict::new(py);
    for (k, v) in [("median", s.median), ("q25", s.q25), ("q75", s.q75), ("p10", s.p10), ("p90", s.p90)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Renders a scene given as JSON; returns `(clean, noisy)`.
#[pyfunction]
fn generate_scene(scene_json: &str, frames: usize) -> PyResult<(PySequence, PySequence)> {
    let spec: SceneSpec = serde_json::from_str(scene_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (clean, noisy) = synth::generate_pair(&spec, frames).map_err(py_err)?;
    Ok((PySequence { inner: clean }, PySequence { inner: noisy }))
}

/// Writes a dataset directory from a manifest JSON string; returns the
/// number of sequences written.
#[pyfunction]
fn generate_dataset(manifest_json: &str, out: PathBuf) -> PyResult<usize> {
    let m = DatasetManifest::from_json(manifest_json).map_err(py_err)?;
    Ok(synth::generate_dataset(&m, &out).map_err(py_err)?.sequences.len())
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    residprop::cli::run(std::iter::once("residprop".to_string()).chain(args))
}

#[pymodule]
fn residprop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyGainModel>()?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(filtered_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_flow, m)?)?;
    m.add_function(wrap_pyfunction!(flow_kernels, m)?)?;
    m.add_function(wrap_pyfunction!(match_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
