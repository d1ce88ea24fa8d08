//! Python bindings for the schedule math, the latency model, trained flow
//! policies and the wire codec.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hflow::flow::{sample_constant, sample_has, FlowModel, SamplerConfig, VelocityField};
use hflow::pipeline::{self, ChunkShape, ClientMode, TimingModel, UniformDist};
use hflow::schedule::{self, HasParams};
use hflow::wire::{ActionPacket, Message};

fn to_py(e: hflow::Error) -> PyErr {
    match e {
        hflow::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (hflow::Error::Domain(_)
        | hflow::Error::Shape { .. }
        | hflow::Error::Config(_)
        | hflow::Error::Infeasible(_)
        | hflow::Error::Protocol(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mode(name: &str) -> PyResult<ClientMode> {
    name.parse().map_err(to_py)
}

/// Hit times `u_i` for a chunk of `h` actions with a `d`-action prefix.
#[pyfunction]
#[pyo3(signature = (h, d, alpha=0.6, u_d=0.9))]
fn hit_times(h: usize, d: usize, alpha: f64, u_d: f64) -> PyResult<Vec<f64>> {
    Ok(schedule::hit_times(h, d, alpha, u_d).map_err(to_py)?.values().to_vec())
}

/// Per-index timesteps at global progress `rho`.
#[pyfunction]
#[pyo3(signature = (rho, h, d, alpha=0.6, u_d=0.9))]
fn local_timesteps(rho: f64, h: usize, d: usize, alpha: f64, u_d: f64) -> PyResult<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(PyValueError::new_err(format!("rho = {rho} not in [0, 1]")));
    }
    let hit = schedule::hit_times(h, d, alpha, u_d).map_err(to_py)?;
    Ok(schedule::local_timesteps(rho, &hit).values().to_vec())
}

/// Sampler steps until actions `[d, d+s)` are final.
#[pyfunction]
#[pyo3(signature = (h, d, s, steps=10, alpha=0.6))]
fn steps_to_finalize(h: usize, d: usize, s: usize, steps: usize, alpha: f64) -> PyResult<usize> {
    let hit = HasParams::single_step(alpha, steps).hit_times(h, d).map_err(to_py)?;
    schedule::steps_to_finalize(&hit, steps, s).map_err(to_py)
}

/// `P(X < Y)` for `X ~ U(a_lo, a_hi)` and `Y ~ U(b_lo, b_hi)`.
#[pyfunction]
fn dominance_probability(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> PyResult<f64> {
    let a = UniformDist::new(a_lo, a_hi).map_err(to_py)?;
    let b = UniformDist::new(b_lo, b_hi).map_err(to_py)?;
    Ok(pipeline::dominance_probability(&a, &b))
}

/// Published per-deployment measurements, as `(name, full_ms, ttfa_ms, horizon)`.
#[pyfunction]
fn presets() -> Vec<(String, f64, f64, usize)> {
    pipeline::presets()
        .into_iter()
        .map(|p| (p.name, p.full_latency, p.ttfa, p.horizon))
        .collect()
}

/// Reaction tables for all presets as two CSV strings.
#[pyfunction]
fn reproduce_tables() -> PyResult<(String, String)> {
    hflow::cli::reproduce_tables(&hflow::config::Config::default()).map_err(to_py)
}

#[pyclass(name = "Timing", from_py_object)]
#[derive(Clone)]
struct PyTiming {
    inner: TimingModel,
    shape: ChunkShape,
}

#[pymethods]
impl PyTiming {
    #[new]
    #[pyo3(signature = (dt_vlm, dt_ae, steps=10, horizon=50, alpha=0.6, overhead=0.0, stream_close=0.0))]
    fn new(dt_vlm: f64, dt_ae: f64, steps: usize, horizon: usize, alpha: f64, overhead: f64, stream_close: f64) -> PyResult<Self> {
        let inner = TimingModel {
            dt_vlm,
            dt_ae,
            steps,
            overhead,
            stream_close,
            ..TimingModel::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self {
            inner,
            shape: ChunkShape {
                horizon,
                has: HasParams::single_step(alpha, steps),
            },
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p = pipeline::presets()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset {name:?}")))?;
        Ok(Self {
            inner: p.timing(10, pipeline::PRESET_STREAM_CLOSE).map_err(to_py)?,
            shape: p.shape(HasParams::single_step(0.6, 10)),
        })
    }

    #[getter]
    fn dt_vlm(&self) -> f64 {
        self.inner.dt_vlm
    }

    #[getter]
    fn dt_ae(&self) -> f64 {
        self.inner.dt_ae
    }

    fn full_latency(&self) -> f64 {
        self.inner.full_latency()
    }

    fn ttfa(&self) -> f64 {
        self.inner.ttfa()
    }

    /// `(d, s_min)` for a client mode.
    fn delay_and_smin(&self, mode_name: &str) -> PyResult<(usize, usize)> {
        let p = pipeline::delay_and_smin(&self.inner, mode(mode_name)?, Some(&self.shape)).map_err(to_py)?;
        Ok((p.d, p.s_min))
    }

    /// `(lo, hi)` of the reaction-time distribution.
    #[pyo3(signature = (mode_name, s=None))]
    fn reaction(&self, mode_name: &str, s: Option<usize>) -> PyResult<(f64, f64)> {
        let m = mode(mode_name)?;
        let s = match s {
            Some(s) => s,
            None => self.delay_and_smin(mode_name)?.1,
        };
        let d = pipeline::reaction_distribution(&self.inner, m, s, Some(&self.shape)).map_err(to_py)?;
        Ok((d.lo, d.hi))
    }

    /// Modes CSV and dominance CSV for sync, async and streaming clients.
    fn compare(&self) -> PyResult<(String, String)> {
        let c = pipeline::compare_modes(&self.inner, &self.shape, &[ClientMode::Sync, ClientMode::AsyncNaive, ClientMode::Faster])
            .map_err(to_py)?;
        Ok((c.modes_csv(), c.dominance_csv()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Timing(dt_vlm={:.3}, dt_ae={:.3}, steps={}, horizon={})",
            self.inner.dt_vlm, self.inner.dt_ae, self.inner.steps, self.shape.horizon
        )
    }
}

#[pyclass(name = "FlowPolicy")]
struct PyFlowPolicy {
    model: FlowModel,
}

#[pymethods]
impl PyFlowPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            model: FlowModel::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    /// Returns `(chunk rows, steps used)`. With `s` set the horizon-aware
    /// sampler stops once actions `[d, d+s)` are final.
    #[pyo3(signature = (obs, steps=10, s=None, prefix=None, alpha=0.6, constant=false, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        obs: Vec<f64>,
        steps: usize,
        s: Option<usize>,
        prefix: Option<Vec<Vec<f64>>>,
        alpha: f64,
        constant: bool,
        seed: u64,
    ) -> PyResult<(Vec<Vec<f64>>, usize)> {
        if obs.len() != self.model.obs_dim() {
            return Err(PyValueError::new_err(format!("observation needs {} values", self.model.obs_dim())));
        }
        let a = self.model.action_dim();
        let rows = prefix.unwrap_or_default();
        if rows.iter().any(|r| r.len() != a) {
            return Err(PyValueError::new_err(format!("prefix rows need {a} values")));
        }
        let prefix = Array2::from_shape_vec((rows.len(), a), rows.concat()).expect("checked row lengths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (chunk, trace) = if constant {
            sample_constant(&self.model, &obs, steps, prefix.view(), &mut rng)
        } else {
            let mut cfg = SamplerConfig::new(steps, alpha, s.unwrap_or(self.model.horizon() - prefix.nrows()));
            cfg.early_stop = s.is_some();
            sample_has(&self.model, &obs, prefix.view(), &cfg, &mut |_| {}, &mut rng)
        }
        .map_err(to_py)?;
        Ok((chunk.0.rows().into_iter().map(|r| r.to_vec()).collect(), trace.steps_used))
    }
}

/// Encodes an action packet frame.
#[pyfunction]
fn encode_action_packet<'py>(py: Python<'py>, chunk_id: u32, index: u16, action: Vec<f32>, step: u8, server_us: u64) -> Bound<'py, PyBytes> {
    let msg = Message::ActionPacket(ActionPacket {
        chunk_id,
        index,
        action,
        step,
        server_us,
    });
    PyBytes::new(py, &msg.encode())
}

/// Decodes an action packet frame into `(chunk_id, index, action, step, server_us)`.
#[pyfunction]
#[pyo3(signature = (frame, action_dim=2))]
fn decode_action_packet(frame: &[u8], action_dim: usize) -> PyResult<(u32, u16, Vec<f32>, u8, u64)> {
    match Message::decode(frame, action_dim).map_err(|e| to_py(e.into()))? {
        Message::ActionPacket(p) => Ok((p.chunk_id, p.index, p.action, p.step, p.server_us)),
        other => Err(PyValueError::new_err(format!("not an action packet (type {})", other.msg_type()))),
    }
}

#[pymodule]
fn hflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hit_times, m)?)?;
    m.add_function(wrap_pyfunction!(local_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(steps_to_finalize, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_probability, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce_tables, m)?)?;
    m.add_function(wrap_pyfunction!(encode_action_packet, m)?)?;
    m.add_function(wrap_pyfunction!(decode_action_packet, m)?)?;
    m.add_class::<PyTiming>()?;
    m.add_class::<PyFlowPolicy>()?;
    Ok(())
}
