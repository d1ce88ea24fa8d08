//! Conditional flow matching over action chunks.
//!
//! The noisy chunk at timestep `tau` is `tau * eps + (1 - tau) * A` and the
//! network regresses the velocity `eps - A`. Sampling integrates from pure
//! noise (`tau = 1`) to data (`tau = 0`) with Euler steps whose size may differ
//! per row: under the horizon-aware schedule the first rows reach `tau = 0`
//! after a single step and can be dispatched while the rest keep denoising.
//!
//! Everything inside the sampler and the loss runs in normalized coordinates;
//! raw observations and actions are converted at the boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::neural::{clip_grad_norm, read_f32s, read_u32, AdamConfig, AdamState, DenseNet};
use crate::schedule::{
    global_rho, local_timesteps, sample_training_schedule, HasParams, HitTimes, ScheduleSample,
    TimestepVector,
};
use crate::{Error, Result};

/// `H x A` matrix of future actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk(pub Array2<f64>);

impl ActionChunk {
    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        Self(Array2::zeros((horizon, action_dim)))
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

fn check_rows(what: &'static str, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, tau: &TimestepVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(what, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if tau.len() != a.nrows() {
        return Err(Error::shape("timestep vector", a.nrows(), tau.len()));
    }
    Ok(())
}

/// Row `i` is `tau_i * noise_i + (1 - tau_i) * clean_i`.
pub fn interpolate(clean: &ActionChunk, noise: &ActionChunk, tau: &TimestepVector) -> Result<ActionChunk> {
    check_rows("noise chunk", clean.view(), noise.view(), tau)?;
    Ok(ActionChunk(interp(clean.view(), noise.view(), tau.values())))
}

fn interp(clean: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>, tau: &[f64]) -> Array2<f64> {
    let mut out = clean.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let t = tau[i];
        if t != 0.0 {
            row.zip_mut_with(&noise.row(i), |c, &e| *c = t * e + (1.0 - t) * *c);
        }
    }
    out
}

/// One-shot extrapolation to `tau = 0`: row `i` is `noisy_i - velocity_i * tau_i`.
pub fn clean_estimate(noisy: &ActionChunk, velocity: &ActionChunk, tau: &TimestepVector) -> Result<ActionChunk> {
    check_rows("velocity chunk", noisy.view(), velocity.view(), tau)?;
    Ok(ActionChunk(extrapolate(noisy.view(), velocity.view(), tau.values())))
}

fn extrapolate(noisy: ArrayView2<'_, f64>, velocity: ArrayView2<'_, f64>, tau: &[f64]) -> Array2<f64> {
    let mut out = noisy.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.zip_mut_with(&velocity.row(i), |x, &v| *x -= v * tau[i]);
    }
    out
}

/// Standardization of observations per dimension and of actions per chunk
/// index and dimension. Action vectors are `H * A` long, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub obs_mean: Vec<f64>,
    pub obs_scale: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_scale: Vec<f64>,
}

const MIN_SCALE: f64 = 1e-6;

impl Normalization {
    pub fn identity(obs_dim: usize, horizon: usize, action_dim: usize) -> Self {
        Self {
            obs_mean: vec![0.0; obs_dim],
            obs_scale: vec![1.0; obs_dim],
            act_mean: vec![0.0; horizon * action_dim],
            act_scale: vec![1.0; horizon * action_dim],
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let (obs_mean, obs_scale) = mean_std(data.obs.view());
        let flat = data
            .chunks
            .view()
            .into_shape_with_order((data.len(), data.horizon() * data.action_dim()))
            .expect("chunks are contiguous");
        let (act_mean, act_scale) = mean_std(flat);
        Self {
            obs_mean,
            obs_scale,
            act_mean,
            act_scale,
        }
    }

    pub fn encode_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Encodes the leading rows of a chunk; row `r` uses index `r`.
    pub fn encode_actions(&self, a: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for (j, x) in out.iter_mut().enumerate() {
            *x = (*x - self.act_mean[j]) / self.act_scale[j];
        }
        out
    }

    pub fn decode_action(&self, index: usize, a: ArrayView1<'_, f64>) -> Vec<f64> {
        let off = index * a.len();
        a.iter()
            .enumerate()
            .map(|(k, x)| x * self.act_scale[off + k] + self.act_mean[off + k])
            .collect()
    }

    pub fn decode_actions(&self, a: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for (j, x) in out.iter_mut().enumerate() {
            *x = *x * self.act_scale[j] + self.act_mean[j];
        }
        out
    }
}

fn mean_std(x: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(x.ncols());
    for row in x.axis_iter(Axis(0)) {
        var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
    }
    let std = var.mapv(|v| (v / n).sqrt().max(MIN_SCALE));
    (mean.to_vec(), std.to_vec())
}

/// Anything that predicts a velocity for a noisy chunk. Inputs and outputs are
/// in the field's normalized coordinates.
pub trait VelocityField {
    fn horizon(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn velocity(&self, obs: &[f64], noisy: ArrayView2<'_, f64>, tau: &[f64]) -> Array2<f64>;

    fn normalization(&self) -> Option<&Normalization> {
        None
    }
}

/// Dense velocity network plus chunk dimensions and data normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub net: DenseNet,
    horizon: usize,
    action_dim: usize,
    obs_dim: usize,
    pub norm: Normalization,
}

impl FlowModel {
    /// Input is `obs (O) ++ noisy chunk (H*A) ++ timesteps (H)`.
    pub fn new<R: Rng + ?Sized>(
        horizon: usize,
        action_dim: usize,
        obs_dim: usize,
        hidden: &[usize],
        norm: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![obs_dim + horizon * action_dim + horizon];
        dims.extend_from_slice(hidden);
        dims.push(horizon * action_dim);
        Self::from_net(DenseNet::new(&dims, rng)?, horizon, action_dim, obs_dim, norm)
    }

    pub fn from_net(net: DenseNet, horizon: usize, action_dim: usize, obs_dim: usize, norm: Normalization) -> Result<Self> {
        let input = obs_dim + horizon * action_dim + horizon;
        if net.input_dim() != input {
            return Err(Error::shape("velocity network input", input, net.input_dim()));
        }
        if net.output_dim() != horizon * action_dim {
            return Err(Error::shape("velocity network output", horizon * action_dim, net.output_dim()));
        }
        if norm.obs_mean.len() != obs_dim || norm.obs_scale.len() != obs_dim {
            return Err(Error::shape("observation normalization", obs_dim, norm.obs_mean.len()));
        }
        let ha = horizon * action_dim;
        if norm.act_mean.len() != ha || norm.act_scale.len() != ha {
            return Err(Error::shape("action normalization", ha, norm.act_mean.len()));
        }
        Ok(Self {
            net,
            horizon,
            action_dim,
            obs_dim,
            norm,
        })
    }

    fn input_row(&self, obs: &[f64], noisy: ArrayView2<'_, f64>, tau: &[f64], out: &mut [f64]) {
        let (o, rest) = out.split_at_mut(self.obs_dim);
        let (x, t) = rest.split_at_mut(self.horizon * self.action_dim);
        o.copy_from_slice(obs);
        for (dst, src) in x.iter_mut().zip(noisy.iter()) {
            *dst = *src;
        }
        t.copy_from_slice(tau);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Network block, then `u32` H, A, O, then the normalization vectors as
    /// `f32`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.net.write_to(w)?;
        for d in [self.horizon, self.action_dim, self.obs_dim] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let n = &self.norm;
        for v in [&n.obs_mean, &n.obs_scale, &n.act_mean, &n.act_scale] {
            for &x in v.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let net = DenseNet::read_from(r)?;
        let horizon = read_u32(r)? as usize;
        let action_dim = read_u32(r)? as usize;
        let obs_dim = read_u32(r)? as usize;
        if horizon == 0 || action_dim == 0 || net.output_dim() != horizon * action_dim {
            return Err(Error::Checkpoint(format!(
                "chunk shape {horizon}x{action_dim} does not match network output {}",
                net.output_dim()
            )));
        }
        let norm = Normalization {
            obs_mean: read_f32s(r, obs_dim)?,
            obs_scale: read_f32s(r, obs_dim)?,
            act_mean: read_f32s(r, horizon * action_dim)?,
            act_scale: read_f32s(r, horizon * action_dim)?,
        };
        Self::from_net(net, horizon, action_dim, obs_dim, norm)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl VelocityField for FlowModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn velocity(&self, obs: &[f64], noisy: ArrayView2<'_, f64>, tau: &[f64]) -> Array2<f64> {
        let mut row = vec![0.0; self.net.input_dim()];
        self.input_row(obs, noisy, tau, &mut row);
        let out = self.net.forward(&row).expect("input row sized from the model");
        Array2::from_shape_vec((self.horizon, self.action_dim), out).expect("output sized H*A")
    }

    fn normalization(&self) -> Option<&Normalization> {
        Some(&self.norm)
    }
}

/// Velocity of the straight path through a known endpoint:
/// `(x_i - target_i) / tau_i`, and zero on rows already at `tau = 0`.
#[derive(Debug, Clone)]
pub struct EndpointOracle {
    pub target: ActionChunk,
    pub obs_dim: usize,
}

impl VelocityField for EndpointOracle {
    fn horizon(&self) -> usize {
        self.target.horizon()
    }

    fn action_dim(&self) -> usize {
        self.target.action_dim()
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn velocity(&self, _obs: &[f64], noisy: ArrayView2<'_, f64>, tau: &[f64]) -> Array2<f64> {
        let mut v = Array2::zeros(noisy.dim());
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            if tau[i] > 0.0 {
                for k in 0..row.len() {
                    row[k] = (noisy[[i, k]] - self.target.0[[i, k]]) / tau[i];
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroVelocity {
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
}

impl VelocityField for ZeroVelocity {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn velocity(&self, _obs: &[f64], noisy: ArrayView2<'_, f64>, _tau: &[f64]) -> Array2<f64> {
        Array2::zeros(noisy.dim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub has: HasParams,
    pub early_stop: bool,
    /// Execution horizon `s`: early stopping waits for rows `[d, d+s)`.
    pub exec_horizon: usize,
}

impl SamplerConfig {
    pub fn new(steps: usize, alpha: f64, exec_horizon: usize) -> Self {
        Self {
            steps,
            has: HasParams::single_step(alpha, steps),
            early_stop: true,
            exec_horizon,
        }
    }
}

/// A finalized action handed to the dispatch sink, in raw action units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub index: usize,
    pub action: Vec<f64>,
    /// 1-based sampler step after which the row reached `tau = 0`.
    pub step: usize,
}

/// Intermediate states of one sampling run, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    /// Initial noise with the prefix written in.
    pub initial: Array2<f64>,
    pub velocities: Vec<Array2<f64>>,
    pub clean_estimates: Vec<Array2<f64>>,
    pub final_state: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub rhos: Vec<f64>,
    /// Step after which each row finalized; `None` for prefix rows and rows
    /// left unfinished by early stopping.
    pub finalize_step: Vec<Option<usize>>,
    pub steps_used: usize,
    pub early_stopped: bool,
    pub path: Option<SamplePath>,
}

/// Euler sampler shared by the constant and horizon-aware schedules.
///
/// `stop_after` enables early stopping once rows `[d, d + s)` are final. The
/// sink sees each valid row once, in index order, the step it finalizes.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_hit_times<V, R>(
    model: &V,
    obs: &[f64],
    prefix: ArrayView2<'_, f64>,
    hit: &HitTimes,
    steps: usize,
    stop_after: Option<usize>,
    record: bool,
    sink: &mut dyn FnMut(Dispatch),
    rng: &mut R,
) -> Result<(ActionChunk, SampleTrace)>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let (h, a) = (model.horizon(), model.action_dim());
    let d = prefix.nrows();
    if steps == 0 {
        return Err(Error::domain("sampler needs at least one step"));
    }
    if obs.len() != model.obs_dim() {
        return Err(Error::shape("observation", model.obs_dim(), obs.len()));
    }
    if d >= h {
        return Err(Error::domain(format!("prefix of {d} rows leaves nothing to sample in a chunk of {h}")));
    }
    if d > 0 && prefix.ncols() != a {
        return Err(Error::shape("prefix action width", a, prefix.ncols()));
    }
    if hit.horizon() != h || hit.prefix_len() != d {
        return Err(Error::domain(format!(
            "hit times built for H={}, d={} but sampling H={h}, d={d}",
            hit.horizon(),
            hit.prefix_len()
        )));
    }
    if let Some(s) = stop_after {
        if s == 0 || d + s > h {
            return Err(Error::domain(format!("execution horizon {s} invalid for prefix {d} and chunk {h}")));
        }
    }

    let norm = model.normalization();
    let obs_n = norm.map_or_else(|| obs.to_vec(), |n| n.encode_obs(obs));
    let prefix_n = match norm {
        Some(n) if d > 0 => n.encode_actions(prefix),
        _ => prefix.to_owned(),
    };
    let decode = |i: usize, row: ArrayView1<'_, f64>| norm.map_or_else(|| row.to_vec(), |n| n.decode_action(i, row));

    let mut x = Array2::<f64>::zeros((h, a));
    x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    x.slice_mut(s![..d, ..]).assign(&prefix_n);

    let mut path = record.then(|| SamplePath {
        initial: x.clone(),
        velocities: Vec::with_capacity(steps),
        clean_estimates: Vec::with_capacity(steps),
        final_state: Array2::zeros((h, a)),
    });
    let mut rhos = Vec::with_capacity(steps);
    let mut finalize_step = vec![None; h];
    let mut steps_used = steps;
    let mut early_stopped = false;

    for j in 1..=steps {
        let rho = global_rho(j, steps);
        rhos.push(rho);
        let tau = local_timesteps(rho, hit);
        let tau_next = local_timesteps(global_rho(j + 1, steps), hit);
        x.slice_mut(s![..d, ..]).assign(&prefix_n);
        let v = model.velocity(&obs_n, x.view(), tau.values());
        if let Some(p) = path.as_mut() {
            p.clean_estimates.push(extrapolate(x.view(), v.view(), tau.values()));
            p.velocities.push(v.clone());
        }
        for i in d..h {
            let dt = tau_next.values()[i] - tau.values()[i];
            if dt != 0.0 {
                let mut row = x.row_mut(i);
                row.zip_mut_with(&v.row(i), |xi, &vi| *xi += vi * dt);
            }
        }
        for i in d..h {
            if finalize_step[i].is_none() && tau_next.values()[i] == 0.0 {
                finalize_step[i] = Some(j);
                sink(Dispatch {
                    index: i,
                    action: decode(i, x.row(i)),
                    step: j,
                });
            }
        }
        if let Some(s) = stop_after {
            if finalize_step[d..d + s].iter().all(Option::is_some) {
                steps_used = j;
                early_stopped = j < steps;
                break;
            }
        }
    }

    if let Some(p) = path.as_mut() {
        p.final_state = x.clone();
    }
    let mut out = norm.map_or_else(|| x.clone(), |n| n.decode_actions(x.view()));
    out.slice_mut(s![..d, ..]).assign(&prefix);
    Ok((
        ActionChunk(out),
        SampleTrace {
            rhos,
            finalize_step,
            steps_used,
            early_stopped,
            path,
        },
    ))
}

/// Plain Euler sampling: every valid row shares the global timestep.
pub fn sample_constant<V, R>(
    model: &V,
    obs: &[f64],
    steps: usize,
    prefix: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Result<(ActionChunk, SampleTrace)>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let hit = HitTimes::zeros(model.horizon(), prefix.nrows())?;
    sample_with_hit_times(model, obs, prefix, &hit, steps, None, false, &mut |_| {}, rng)
}

/// Horizon-aware sampling with streaming dispatch and optional early stop.
pub fn sample_has<V, R>(
    model: &V,
    obs: &[f64],
    prefix: ArrayView2<'_, f64>,
    cfg: &SamplerConfig,
    sink: &mut dyn FnMut(Dispatch),
    rng: &mut R,
) -> Result<(ActionChunk, SampleTrace)>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let hit = cfg.has.hit_times(model.horizon(), prefix.nrows())?;
    let stop = cfg.early_stop.then_some(cfg.exec_horizon);
    if !cfg.early_stop && (cfg.exec_horizon == 0 || prefix.nrows() + cfg.exec_horizon > model.horizon()) {
        return Err(Error::domain(format!("execution horizon {} invalid", cfg.exec_horizon)));
    }
    sample_with_hit_times(model, obs, prefix, &hit, cfg.steps, stop, false, sink, rng)
}

/// Observations paired with expert chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x O`
    pub obs: Array2<f64>,
    /// `n x H x A`
    pub chunks: Array3<f64>,
}

impl Dataset {
    pub fn new(obs: Array2<f64>, chunks: Array3<f64>) -> Result<Self> {
        if obs.nrows() != chunks.dim().0 {
            return Err(Error::shape("dataset chunks", obs.nrows(), chunks.dim().0));
        }
        Ok(Self { obs, chunks })
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.chunks.dim().1
    }

    pub fn action_dim(&self) -> usize {
        self.chunks.dim().2
    }

    pub fn chunk(&self, i: usize) -> ArrayView2<'_, f64> {
        self.chunks.index_axis(Axis(0), i)
    }

    /// Splits off the last `fraction` of samples.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let n_test = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - n_test.min(self.len());
        (
            Dataset {
                obs: self.obs.slice(s![..cut, ..]).to_owned(),
                chunks: self.chunks.slice(s![..cut, .., ..]).to_owned(),
            },
            Dataset {
                obs: self.obs.slice(s![cut.., ..]).to_owned(),
                chunks: self.chunks.slice(s![cut.., .., ..]).to_owned(),
            },
        )
    }
}

/// One training example in normalized coordinates.
struct Example<'a> {
    obs: &'a [f64],
    clean: ArrayView2<'a, f64>,
    noise: ArrayView2<'a, f64>,
    sched: &'a ScheduleSample,
}

/// Mean masked loss over a batch and its parameter gradient.
fn batch_loss(model: &FlowModel, batch: &[Example<'_>], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let (h, a) = (model.horizon, model.action_dim);
    let width = model.net.input_dim();
    let mut inputs = Array2::<f64>::zeros((batch.len(), width));
    let mut targets = Array2::<f64>::zeros((batch.len(), h * a));
    for (b, ex) in batch.iter().enumerate() {
        if ex.sched.mask.count_ones() == 0 {
            return Err(Error::domain("loss mask selects no rows"));
        }
        let noisy = interp(ex.clean, ex.noise, ex.sched.tau.values());
        let mut row = inputs.row_mut(b);
        model.input_row(
            ex.obs,
            noisy.view(),
            ex.sched.tau.values(),
            row.as_slice_mut().expect("row-major input"),
        );
        let mut t = targets.row_mut(b);
        for (k, (e, c)) in ex.noise.iter().zip(ex.clean.iter()).enumerate() {
            t[k] = e - c;
        }
    }
    let cache = model.net.forward_cached(inputs.view())?;
    let out = cache.output();
    let mut upstream = Array2::<f64>::zeros(out.dim());
    let mut total = 0.0;
    let nb = batch.len() as f64;
    for (b, ex) in batch.iter().enumerate() {
        let mask = ex.sched.mask.bits();
        let denom = ex.sched.mask.count_ones() as f64;
        let mut loss = 0.0;
        for i in 0..h {
            if !mask[i] {
                continue;
            }
            for k in 0..a {
                let j = i * a + k;
                let r = out[[b, j]] - targets[[b, j]];
                loss += r * r;
                upstream[[b, j]] = 2.0 * r / (denom * nb);
            }
        }
        total += loss / denom;
    }
    let grads = if want_grad {
        model.net.backward(&cache, upstream.view())?.0
    } else {
        Vec::new()
    };
    Ok((total / nb, grads))
}

/// Masked flow-matching loss `||m * (v - (eps - A))||^2 / ||m||_1` for one
/// example, with its parameter gradient. `obs`, `clean` and `noise` are raw
/// (unnormalized) except `noise`, which is already standard normal.
pub fn training_loss(
    model: &FlowModel,
    obs: &[f64],
    clean: &ActionChunk,
    noise: &ActionChunk,
    sched: &ScheduleSample,
) -> Result<(f64, Vec<f64>)> {
    if obs.len() != model.obs_dim {
        return Err(Error::shape("observation", model.obs_dim, obs.len()));
    }
    if clean.view().dim() != (model.horizon, model.action_dim) {
        return Err(Error::shape("clean chunk rows", model.horizon, clean.horizon()));
    }
    check_rows("noise chunk", clean.view(), noise.view(), &sched.tau)?;
    let obs_n = model.norm.encode_obs(obs);
    let clean_n = model.norm.encode_actions(clean.view());
    batch_loss(
        model,
        &[Example {
            obs: &obs_n,
            clean: clean_n.view(),
            noise: noise.view(),
            sched,
        }],
        true,
    )
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of drawing the horizon-aware schedule for an example.
    pub p: f64,
    pub d_max: usize,
    /// Filled from the schedule section when loaded through a config file.
    #[serde(skip)]
    pub has: HasParams,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 128,
            p: 0.5,
            d_max: 10,
            has: HasParams::single_step(0.6, 10),
            seed: 0,
            hidden: vec![512, 512],
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            grad_clip: 1.0,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p = {} not in [0, 1]", self.p)));
        }
        if self.d_max >= horizon {
            return Err(Error::Config(format!("d_max {} must be below H = {horizon}", self.d_max)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid hidden widths {:?}", self.hidden)));
        }
        if !(self.grad_clip > 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("grad_clip and lr must be positive".into()));
        }
        self.has.hit_times(horizon, self.d_max)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
}

/// Mixed-schedule training with prefix conditioning.
///
/// Per example: draw noise, `rho`, `d` and the schedule kind; prefix rows enter
/// the network as ground truth at `tau = 0` and are masked out of the loss.
pub fn train(data: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<FlowModel> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (h, a, o) = (data.horizon(), data.action_dim(), data.obs_dim());
    cfg.validate(h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let norm = Normalization::fit(data);
    let mut model = FlowModel::new(h, a, o, &cfg.hidden, norm, &mut rng)?;
    let mut opt = AdamState::new(cfg.adam, model.net.params().len());

    let obs_n: Vec<Vec<f64>> = data
        .obs
        .axis_iter(Axis(0))
        .map(|r| model.norm.encode_obs(r.as_slice().expect("row-major obs")))
        .collect();
    let chunks_n: Vec<Array2<f64>> = (0..data.len())
        .map(|i| model.norm.encode_actions(data.chunk(i)))
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as f64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let mut noises = Vec::with_capacity(idx.len());
            let mut scheds = Vec::with_capacity(idx.len());
            for _ in idx {
                noises.push(Array2::<f64>::from_shape_fn((h, a), |_| rng.sample(StandardNormal)));
                scheds.push(sample_training_schedule(&mut rng, h, cfg.has, cfg.p, cfg.d_max)?);
            }
            let batch: Vec<Example<'_>> = idx
                .iter()
                .enumerate()
                .map(|(b, &i)| Example {
                    obs: &obs_n[i],
                    clean: chunks_n[i].view(),
                    noise: noises[b].view(),
                    sched: &scheds[b],
                })
                .collect();
            let (loss, mut grads) = batch_loss(&model, &batch, true)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            if cfg.cosine_decay {
                let progress = opt.step_count() as f64 / total_steps;
                opt.config.lr = cfg.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            opt.step(model.net.params_mut(), &grads)?;
            sum += loss;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: sum / batches as f64,
            steps: opt.step_count(),
        };
        log::info!("epoch {epoch}: mean loss {:.5}", stats.mean_loss);
        on_epoch(&stats);
    }
    Ok(model)
}

/// Loss on `data` under the constant schedule with no prefix, using a fixed
/// noise / `rho` stream. Rows at `tau = 0` carry an irreducible unit-variance
/// target under the mixed schedule, so progress is tracked on this variant.
pub fn evaluation_loss(model: &FlowModel, data: &Dataset, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let (h, a) = (model.horizon, model.action_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let mut obs = Vec::new();
        let mut clean = Vec::new();
        let mut noises = Vec::new();
        let mut scheds = Vec::new();
        for i in start..end {
            obs.push(model.norm.encode_obs(data.obs.row(i).as_slice().expect("row-major obs")));
            clean.push(model.norm.encode_actions(data.chunk(i)));
            noises.push(Array2::<f64>::from_shape_fn((h, a), |_| rng.sample(StandardNormal)));
            let rho: f64 = rng.random();
            scheds.push(ScheduleSample {
                rho,
                prefix_len: 0,
                kind: crate::schedule::ScheduleKind::Constant,
                tau: crate::schedule::constant_timesteps(rho, h, 0)?,
                mask: crate::schedule::prefix_mask(h, 0)?,
            });
        }
        let batch: Vec<Example<'_>> = (0..obs.len())
            .map(|b| Example {
                obs: &obs[b],
                clean: clean[b].view(),
                noise: noises[b].view(),
                sched: &scheds[b],
            })
            .collect();
        total += batch_loss(model, &batch, false)?.0 * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Per-index straightness with a percentile band across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Straightness {
    pub mean: Vec<f64>,
    pub p05: Vec<f64>,
    pub p95: Vec<f64>,
}

fn constant_paths<V: VelocityField + ?Sized>(
    model: &V,
    eval_obs: &[Vec<f64>],
    steps: usize,
    seed: u64,
) -> Result<Vec<SamplePath>> {
    if eval_obs.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hit = HitTimes::zeros(model.horizon(), 0)?;
    let empty = Array2::<f64>::zeros((0, model.action_dim()));
    eval_obs
        .iter()
        .map(|o| {
            let (_, trace) = sample_with_hit_times(model, o, empty.view(), &hit, steps, None, true, &mut |_| {}, &mut rng)?;
            Ok(trace.path.expect("recorded"))
        })
        .collect()
}

/// `S_i = (1/N) sum_j ||(A1_i - A0_i) - v_i^j||^2` per sample, summarized
/// per index across samples. Each sample draws fresh noise.
pub fn straightness<V: VelocityField + ?Sized>(
    model: &V,
    eval_obs: &[Vec<f64>],
    steps: usize,
    seed: u64,
) -> Result<Straightness> {
    let paths = constant_paths(model, eval_obs, steps, seed)?;
    let h = model.horizon();
    let mut per_index = vec![Vec::with_capacity(paths.len()); h];
    for p in &paths {
        let disp = &p.initial - &p.final_state;
        for (i, col) in per_index.iter_mut().enumerate() {
            let s: f64 = p
                .velocities
                .iter()
                .map(|v| {
                    disp.row(i)
                        .iter()
                        .zip(v.row(i))
                        .map(|(dx, vx)| (dx - vx) * (dx - vx))
                        .sum::<f64>()
                })
                .sum();
            col.push(s / steps as f64);
        }
    }
    let mut out = Straightness {
        mean: Vec::with_capacity(h),
        p05: Vec::with_capacity(h),
        p95: Vec::with_capacity(h),
    };
    for mut col in per_index {
        col.sort_by(f64::total_cmp);
        out.mean.push(col.iter().sum::<f64>() / col.len() as f64);
        out.p05.push(percentile(&col, 0.05));
        out.p95.push(percentile(&col, 0.95));
    }
    Ok(out)
}

/// `N x H` matrix: entry `(j, i)` is the mean distance between the clean
/// estimate at step `j + 1` and the final output, for index `i`.
pub fn deviation_curves<V: VelocityField + ?Sized>(
    model: &V,
    eval_obs: &[Vec<f64>],
    steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let paths = constant_paths(model, eval_obs, steps, seed)?;
    let h = model.horizon();
    let mut out = Array2::<f64>::zeros((steps, h));
    for p in &paths {
        for (j, est) in p.clean_estimates.iter().enumerate() {
            for i in 0..h {
                let dist = est
                    .row(i)
                    .iter()
                    .zip(p.final_state.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out[[j, i]] += dist;
            }
        }
    }
    out /= paths.len() as f64;
    Ok(out)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

/// Straightness and clean-estimate deviation of a model over one evaluation
/// set, with the early-versus-late comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotReport {
    pub straightness: Straightness,
    /// `N x H`, see [`deviation_curves`].
    pub deviation: Array2<f64>,
}

/// Means over the first and last `fraction` of indices.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Trend {
    pub early: f64,
    pub late: f64,
}

impl Trend {
    fn of(v: &[f64], fraction: f64) -> Self {
        let k = ((v.len() as f64 * fraction).round() as usize).clamp(1, v.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Self {
            early: mean(&v[..k]),
            late: mean(&v[v.len() - k..]),
        }
    }

    /// Positive when early indices are lower.
    pub fn margin(&self) -> f64 {
        self.late - self.early
    }

    pub fn holds(&self) -> bool {
        self.early < self.late
    }
}

impl PilotReport {
    pub fn run<V: VelocityField + ?Sized>(model: &V, eval_obs: &[Vec<f64>], steps: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            straightness: straightness(model, eval_obs, steps, seed)?,
            deviation: deviation_curves(model, eval_obs, steps, seed)?,
        })
    }

    pub fn straightness_trend(&self, fraction: f64) -> Trend {
        Trend::of(&self.straightness.mean, fraction)
    }

    /// Deviation after the first sampler step.
    pub fn deviation_trend(&self, fraction: f64) -> Trend {
        Trend::of(self.deviation.row(0).as_slice().expect("standard layout"), fraction)
    }

    pub fn straightness_csv(&self) -> String {
        let s = &self.straightness;
        let mut out = String::from("index,straightness,p05,p95\n");
        for i in 0..s.mean.len() {
            out += &format!("{i},{},{},{}\n", s.mean[i], s.p05[i], s.p95[i]);
        }
        out
    }

    pub fn deviation_csv(&self) -> String {
        let mut out = String::from("step,index,deviation\n");
        for ((j, i), v) in self.deviation.indexed_iter() {
            out += &format!("{},{i},{v}\n", j + 1);
        }
        out
    }
}
