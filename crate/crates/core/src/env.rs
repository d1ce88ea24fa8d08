//! A point mass chasing a target that jumps at random times.
//!
//! Positions live in `[-1, 1]^2`. Time advances in control ticks and actions
//! are displacements per tick, so one step is `p <- clamp(p + a)`. The expert
//! is a saturated proportional controller. Demonstration chunks perturb every
//! action after the first with a random-walk drift, which makes far-horizon
//! actions less predictable than near ones, the way human teleoperation is.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::flow::{ActionChunk, Dataset};
use crate::{Error, Result};

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;
pub const BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Proportional gain of the expert.
    pub gain: f64,
    /// Speed limit, workspace units per tick.
    pub v_max: f64,
    /// Per-tick probability of a target jump; 0 keeps one target per episode.
    pub jump_rate: f64,
    pub min_jump: f64,
    /// Spread of a per-chunk deviation of the demonstrated plan; it grows
    /// linearly from zero at the first action to this standard deviation at
    /// the last.
    pub demo_noise: f64,
    pub episodes: usize,
    pub episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            gain: 0.02,
            v_max: 0.08,
            jump_rate: 0.01,
            min_jump: 0.5,
            demo_noise: 0.0025,
            episodes: 200,
            episode_len: 300,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.episodes == 0 || self.episode_len == 0 {
            return Err(Error::Config("horizon, episodes and episode_len must be positive".into()));
        }
        if !(self.gain > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::Config("gain and v_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jump_rate) {
            return Err(Error::Config(format!("jump_rate {} not in [0, 1)", self.jump_rate)));
        }
        if !(self.min_jump >= 0.0 && self.min_jump < 2.0) || !(self.demo_noise >= 0.0) {
            return Err(Error::Config("min_jump must be in [0, 2) and demo_noise non-negative".into()));
        }
        Ok(())
    }
}

fn clamp2(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-BOUND, BOUND), p[1].clamp(-BOUND, BOUND)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    pub position: [f64; 2],
    pub target: [f64; 2],
    pub time: u64,
}

impl WorldState {
    pub fn new(position: [f64; 2], target: [f64; 2]) -> Self {
        Self {
            position: clamp2(position),
            target: clamp2(target),
            time: 0,
        }
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        [self.position[0], self.position[1], self.target[0], self.target[1]]
    }

    pub fn step(&mut self, action: [f64; 2]) {
        self.position = clamp2([self.position[0] + action[0], self.position[1] + action[1]]);
        self.time += 1;
    }
}

fn limit(a: [f64; 2], v_max: f64) -> [f64; 2] {
    let n = a[0].hypot(a[1]);
    if n > v_max {
        [a[0] * v_max / n, a[1] * v_max / n]
    } else {
        a
    }
}

/// `k * (target - position)`, scaled down to length `v_max` if longer.
pub fn expert_action(state: &WorldState, k: f64, v_max: f64) -> [f64; 2] {
    limit(
        [
            k * (state.target[0] - state.position[0]),
            k * (state.target[1] - state.position[1]),
        ],
        v_max,
    )
}

/// Expert rollout of `h` ticks with the target held fixed.
pub fn expert_chunk(state: &WorldState, h: usize, k: f64, v_max: f64) -> ActionChunk {
    rollout(state, h, k, v_max, |_| [0.0, 0.0])
}

/// Expert rollout with random-walk drift added to every action after the
/// first; the first action is the plain expert action.
pub fn demo_chunk<R: Rng + ?Sized>(state: &WorldState, cfg: &EnvConfig, rng: &mut R) -> ActionChunk {
    let sigma = cfg.demo_noise;
    let z: [f64; 2] = if sigma > 0.0 {
        [sigma * rng.sample::<f64, _>(StandardNormal), sigma * rng.sample::<f64, _>(StandardNormal)]
    } else {
        [0.0, 0.0]
    };
    let ramp = 1.0 / (cfg.horizon.max(2) - 1) as f64;
    rollout(state, cfg.horizon, cfg.gain, cfg.v_max, |i| {
        let w = i as f64 * ramp;
        [z[0] * w, z[1] * w]
    })
}

fn rollout(state: &WorldState, h: usize, k: f64, v_max: f64, mut drift: impl FnMut(usize) -> [f64; 2]) -> ActionChunk {
    let mut s = *state;
    let mut out = Array2::zeros((h, ACTION_DIM));
    for i in 0..h {
        let e = expert_action(&s, k, v_max);
        let dr = drift(i);
        let a = if dr == [0.0, 0.0] {
            e
        } else {
            limit([e[0] + dr[0], e[1] + dr[1]], v_max)
        };
        out[[i, 0]] = a[0];
        out[[i, 1]] = a[1];
        s.step(a);
    }
    ActionChunk(out)
}

/// Uniform point in the workspace at least `min_dist` away from `from`.
pub fn sample_target<R: Rng + ?Sized>(rng: &mut R, from: [f64; 2], min_dist: f64) -> [f64; 2] {
    loop {
        let p = [rng.random_range(-BOUND..=BOUND), rng.random_range(-BOUND..=BOUND)];
        if (p[0] - from[0]).hypot(p[1] - from[1]) >= min_dist {
            return p;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    pub jump_times: Vec<u64>,
    pub jump_targets: Vec<[f64; 2]>,
    pub seed: u64,
}

impl EventSchedule {
    /// Geometric inter-arrival times with success probability `rate`, over
    /// ticks `1..len`. Each new target is at least `min_jump` from the last.
    pub fn generate(len: u64, rate: f64, min_jump: f64, first_target: [f64; 2], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self {
            jump_times: Vec::new(),
            jump_targets: Vec::new(),
            seed,
        };
        if rate <= 0.0 {
            return Ok(out);
        }
        let geo = Geometric::new(rate).map_err(|e| Error::Config(format!("jump rate: {e}")))?;
        let mut t = 0u64;
        let mut last = first_target;
        loop {
            t = t.saturating_add(geo.sample(&mut rng) + 1);
            if t >= len {
                break;
            }
            last = sample_target(&mut rng, last, min_jump);
            out.jump_times.push(t);
            out.jump_targets.push(last);
        }
        Ok(out)
    }
}

/// One stored tick of a demonstration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub ep: usize,
    pub t: u64,
    pub obs: [f64; OBS_DIM],
    pub chunk: Vec<[f64; ACTION_DIM]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub records: Vec<Record>,
    pub seed: u64,
    pub events: EventSchedule,
}

fn episode_rng(seed: u64, ep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ep as u64);
    rng
}

/// Roll out one demonstration. The executed action each tick is the first
/// row of the stored chunk.
pub fn generate_episode(cfg: &EnvConfig, ep: usize, seed: u64) -> Result<Episode> {
    let mut rng = episode_rng(seed, ep);
    let start = [rng.random_range(-BOUND..=BOUND), rng.random_range(-BOUND..=BOUND)];
    let first = sample_target(&mut rng, start, cfg.min_jump);
    let events = EventSchedule::generate(cfg.episode_len as u64, cfg.jump_rate, cfg.min_jump, first, rng.random())?;
    let mut state = WorldState::new(start, first);
    let mut next_event = 0;
    let mut records = Vec::with_capacity(cfg.episode_len);
    for t in 0..cfg.episode_len as u64 {
        if next_event < events.jump_times.len() && events.jump_times[next_event] == t {
            state.target = events.jump_targets[next_event];
            next_event += 1;
        }
        let chunk = demo_chunk(&state, cfg, &mut rng);
        let rows: Vec<[f64; 2]> = chunk.0.rows().into_iter().map(|r| [r[0], r[1]]).collect();
        records.push(Record {
            ep,
            t,
            obs: state.observation(),
            chunk: rows,
        });
        let a = records.last().unwrap().chunk[0];
        state.step(a);
    }
    Ok(Episode { records, seed, events })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub env: EnvConfig,
}

const FORMAT: &str = "hflow-demos-v1";

/// Writes a JSON-Lines file: one header line, then one record per tick.
/// Returns the number of records.
pub fn generate_dataset(cfg: &EnvConfig, seed: u64, path: &Path) -> Result<usize> {
    cfg.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: FORMAT.into(),
        seed,
        obs_dim: OBS_DIM,
        action_dim: ACTION_DIM,
        env: cfg.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut n = 0;
    for ep in 0..cfg.episodes {
        for rec in generate_episode(cfg, ep, seed)?.records {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            n += 1;
        }
    }
    w.flush()?;
    Ok(n)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Dataset)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty dataset file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Config(format!("{}:1: bad header: {e}", path.display())))?;
    if header.format != FORMAT {
        return Err(Error::Config(format!("{}: unknown format {:?}", path.display(), header.format)));
    }
    let h = header.env.horizon;
    let mut obs = Vec::new();
    let mut acts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2)))?;
        if rec.chunk.len() != h {
            return Err(Error::Config(format!(
                "{}:{}: chunk has {} rows, header says {h}",
                path.display(),
                lineno + 2,
                rec.chunk.len()
            )));
        }
        obs.extend_from_slice(&rec.obs);
        acts.extend(rec.chunk.iter().flatten());
    }
    let n = obs.len() / OBS_DIM;
    let data = Dataset::new(
        Array2::from_shape_vec((n, OBS_DIM), obs).expect("sized"),
        Array3::from_shape_vec((n, h, ACTION_DIM), acts).expect("sized"),
    )?;
    Ok((header, data))
}

/// In-memory dataset, same content as [`generate_dataset`] writes.
pub fn build_dataset(cfg: &EnvConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut obs = Vec::new();
    let mut acts = Vec::new();
    for ep in 0..cfg.episodes {
        for rec in generate_episode(cfg, ep, seed)?.records {
            obs.extend_from_slice(&rec.obs);
            acts.extend(rec.chunk.iter().flatten());
        }
    }
    let n = obs.len() / OBS_DIM;
    Dataset::new(
        Array2::from_shape_vec((n, OBS_DIM), obs).expect("sized"),
        Array3::from_shape_vec((n, cfg.horizon, ACTION_DIM), acts).expect("sized"),
    )
}

/// An action as executed by a controller, with the timestamps needed to
/// attribute it to an observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutedAction {
    pub exec_time: f64,
    /// When the action became available to the controller.
    pub available_time: f64,
    /// Capture time of the observation the action was computed from.
    pub obs_time: f64,
    pub chunk_id: u64,
    pub action: [f64; 2],
    /// Position just before the action was applied.
    pub position: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub target: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reaction {
    /// Availability of the first executed action computed from an
    /// observation taken at or after the event, minus the event time.
    pub protocol: f64,
    /// Execution of the first action pointing within 30 degrees of the new
    /// target, minus the event time. `None` if no such action was executed.
    pub behavioral: Option<f64>,
}

const BEHAVIORAL_COS: f64 = 0.866_025_403_784_438_6; // cos(30 deg)

/// Measures the reaction to `event` from a trace ordered by execution time.
/// Only actions executed before `until` are considered for the behavioral
/// metric.
pub fn behavioral_reaction(trace: &[ExecutedAction], event: &JumpEvent, until: f64) -> Result<Reaction> {
    let protocol = trace
        .iter()
        .find(|a| a.obs_time >= event.time)
        .map(|a| a.available_time - event.time)
        .ok_or_else(|| Error::Trace(format!("no action computed after the event at {}", event.time)))?;
    let behavioral = trace
        .iter()
        .filter(|a| a.exec_time >= event.time && a.exec_time < until)
        .find(|a| {
            let b = [event.target[0] - a.position[0], event.target[1] - a.position[1]];
            let (na, nb) = (a.action[0].hypot(a.action[1]), b[0].hypot(b[1]));
            na > 0.0 && nb > 0.0 && (a.action[0] * b[0] + a.action[1] * b[1]) / (na * nb) >= BEHAVIORAL_COS
        })
        .map(|a| a.exec_time - event.time);
    Ok(Reaction { protocol, behavioral })
}
