//! Reaction-time analysis of chunked policy execution.
//!
//! Two halves: closed-form latency / reaction distributions per client mode,
//! and a deterministic discrete-event simulator that runs a controller against
//! the env with the same timing model and measures reactions empirically.
//!
//! All times are in milliseconds.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{behavioral_reaction, expert_chunk, sample_target, EnvConfig, ExecutedAction, JumpEvent, Reaction, WorldState};
use crate::flow::{sample_constant, sample_with_hit_times, FlowModel, VelocityField};
use crate::schedule::{finalization_steps, HasParams};
use crate::{Error, Result};

/// Slack for turning latencies into whole control periods.
const TICK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingModel {
    pub dt_ctrl: f64,
    /// Backbone / observation encoding time before the first sampler step.
    pub dt_vlm: f64,
    /// One sampler step.
    pub dt_ae: f64,
    /// Sampler steps; comes from the schedule section of a config file.
    #[serde(skip)]
    pub steps: usize,
    /// Network and processing time, paid once per request.
    pub overhead: f64,
    /// Extra time to close out a streamed chunk after its last needed action
    /// (final packet, bookkeeping); delays the next request but not TTFA.
    pub stream_close: f64,
    pub delay_pad: usize,
    pub smin_pad: usize,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            dt_ctrl: 1000.0 / 30.0,
            dt_vlm: 60.0,
            dt_ae: 2.0,
            steps: 10,
            overhead: 0.0,
            stream_close: 0.0,
            delay_pad: 0,
            smin_pad: 0,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dt_ctrl, self.dt_vlm, self.dt_ae, self.overhead, self.stream_close];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("timing values must be finite and non-negative".into()));
        }
        if !(self.dt_ctrl > 0.0) || self.steps == 0 {
            return Err(Error::Config("dt_ctrl must be positive and steps at least 1".into()));
        }
        Ok(())
    }

    /// Observation-to-chunk latency with all `N` steps.
    pub fn full_latency(&self) -> f64 {
        self.dt_vlm + self.steps as f64 * self.dt_ae + self.overhead
    }

    /// Time until the first streamed action.
    pub fn ttfa(&self) -> f64 {
        self.dt_vlm + self.dt_ae + self.overhead
    }

    /// Recovers `(dt_vlm + overhead, dt_ae)` from a measured full latency and
    /// time to first action.
    pub fn fit(full: f64, ttfa: f64, steps: usize) -> Result<(f64, f64)> {
        if steps < 2 || full < ttfa {
            return Err(Error::domain("need N >= 2 and full latency >= TTFA to fit timings"));
        }
        let dt_ae = (full - ttfa) / (steps - 1) as f64;
        Ok((ttfa - dt_ae, dt_ae))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Sync,
    AsyncNaive,
    AsyncPrefix,
    /// Streaming client on the horizon-aware sampler with early stopping.
    Faster,
}

impl ClientMode {
    pub const ALL: [ClientMode; 4] = [ClientMode::Sync, ClientMode::AsyncNaive, ClientMode::AsyncPrefix, ClientMode::Faster];

    pub fn name(self) -> &'static str {
        match self {
            ClientMode::Sync => "sync",
            ClientMode::AsyncNaive => "async_naive",
            ClientMode::AsyncPrefix => "async_prefix",
            ClientMode::Faster => "faster",
        }
    }

    pub fn is_async(self) -> bool {
        self != ClientMode::Sync
    }

    /// Whether overlapping actions of the previous chunk condition the next.
    pub fn uses_prefix(self) -> bool {
        matches!(self, ClientMode::AsyncPrefix | ClientMode::Faster)
    }
}

impl std::str::FromStr for ClientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(ClientMode::Sync),
            "async" | "async_naive" | "async-naive" => Ok(ClientMode::AsyncNaive),
            "async_prefix" | "async-prefix" => Ok(ClientMode::AsyncPrefix),
            "faster" | "streaming" => Ok(ClientMode::Faster),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ClientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Chunk length and schedule shape, needed to time the streaming mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkShape {
    pub horizon: usize,
    pub has: HasParams,
}

/// Effective inference latency of a mode: full latency, or TTFA when
/// streaming.
pub fn infer_latency(t: &TimingModel, mode: ClientMode) -> f64 {
    match mode {
        ClientMode::Faster => t.ttfa(),
        _ => t.full_latency(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayPlan {
    /// Stale actions at the head of each chunk.
    pub d: usize,
    pub s_min: usize,
    /// Sampler steps per request at `s = s_min` (streaming only).
    pub steps_used: usize,
}

/// Streaming-mode delay for execution horizon `s`: starts from
/// `floor(TTFA / dt)` and grows until every index in `[d, d+s)` arrives by its
/// tick. Indices are executed `i + 1` periods after the request.
fn streaming_delay(t: &TimingModel, shape: &ChunkShape, s: usize) -> Result<Option<(usize, usize)>> {
    let mut d = ((t.ttfa() / t.dt_ctrl) + TICK_EPS).floor() as usize;
    while d + s <= shape.horizon {
        let hit = shape.has.hit_times(shape.horizon, d)?;
        let fin = finalization_steps(&hit, t.steps);
        let late = (d..d + s).any(|i| {
            let step = fin[i].unwrap_or(t.steps) as f64;
            t.dt_vlm + step * t.dt_ae + t.overhead > (i + 1) as f64 * t.dt_ctrl + TICK_EPS
        });
        if !late {
            let used = fin[d..d + s].iter().map(|f| f.unwrap_or(t.steps)).max().unwrap_or(t.steps);
            return Ok(Some((d, used)));
        }
        d += 1;
    }
    Ok(None)
}

/// Completion time of a streamed request measured from the trigger.
fn streaming_busy(t: &TimingModel, steps_used: usize) -> f64 {
    t.dt_vlm + steps_used as f64 * t.dt_ae + t.overhead + t.stream_close
}

/// Discretized delay `d` and smallest stall-free execution horizon.
///
/// Sync/async: `d = floor(L / dt)`, `s_min = ceil(L / dt)` with `L` the full
/// latency. Streaming: smallest `s` whose cycle `s * dt` covers the early
/// stopped request, with `d` from [`streaming_delay`]. Pads are added last.
pub fn delay_and_smin(t: &TimingModel, mode: ClientMode, shape: Option<&ChunkShape>) -> Result<DelayPlan> {
    t.validate()?;
    let plan = match mode {
        ClientMode::Faster => {
            let shape = shape.ok_or_else(|| Error::Config("streaming mode needs the chunk shape".into()))?;
            let mut found = None;
            for s in 1..=shape.horizon {
                if let Some((d, used)) = streaming_delay(t, shape, s)? {
                    if s as f64 * t.dt_ctrl + TICK_EPS >= streaming_busy(t, used) {
                        found = Some(DelayPlan { d, s_min: s, steps_used: used });
                        break;
                    }
                }
            }
            found.ok_or_else(|| {
                Error::Infeasible(format!(
                    "no execution horizon up to H = {} keeps streaming stall-free",
                    shape.horizon
                ))
            })?
        }
        _ => {
            let ratio = t.full_latency() / t.dt_ctrl;
            DelayPlan {
                d: (ratio + TICK_EPS).floor() as usize,
                s_min: ((ratio - TICK_EPS).ceil() as usize).max(1),
                steps_used: t.steps,
            }
        }
    };
    let plan = DelayPlan {
        d: plan.d + t.delay_pad,
        s_min: plan.s_min + t.smin_pad,
        ..plan
    };
    if let Some(sh) = shape {
        if mode.is_async() && plan.d + plan.s_min > sh.horizon {
            return Err(Error::Infeasible(format!(
                "d = {} plus s_min = {} exceeds H = {}",
                plan.d, plan.s_min, sh.horizon
            )));
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformDist {
    pub lo: f64,
    pub hi: f64,
}

impl UniformDist {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::domain(format!("invalid uniform bounds [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        if x < self.lo {
            0.0
        } else if x >= self.hi {
            1.0
        } else {
            (x - self.lo) / self.width()
        }
    }

    /// `integral_p^q P(Y > x) dx` for `Y` with this distribution.
    fn survival_integral(&self, p: f64, q: f64) -> f64 {
        let below = (q.min(self.lo) - p).max(0.0);
        let (x1, x2) = (p.max(self.lo), q.min(self.hi));
        let ramp = if x2 > x1 && self.width() > 0.0 {
            ((self.hi - x1).powi(2) - (self.hi - x2).powi(2)) / (2.0 * self.width())
        } else {
            0.0
        };
        below + ramp
    }
}

/// Reaction-time distribution of a mode at execution horizon `s`.
pub fn reaction_distribution(t: &TimingModel, mode: ClientMode, s: usize, shape: Option<&ChunkShape>) -> Result<UniformDist> {
    if s == 0 {
        return Err(Error::Infeasible("execution horizon must be at least 1".into()));
    }
    let exec = s as f64 * t.dt_ctrl;
    let l = infer_latency(t, mode);
    if mode.is_async() {
        let plan = delay_and_smin(t, mode, shape)?;
        if s < plan.s_min {
            return Err(Error::Infeasible(format!("s = {s} below s_min = {} for {mode}", plan.s_min)));
        }
        UniformDist::new(l, l + exec)
    } else {
        UniformDist::new(l, 2.0 * l + exec)
    }
}

/// Exact `P(X < Y)` for independent `X ~ a`, `Y ~ b`.
pub fn dominance_probability(a: &UniformDist, b: &UniformDist) -> f64 {
    if a.width() == 0.0 {
        if b.width() == 0.0 {
            return if a.lo < b.lo { 1.0 } else if a.lo > b.lo { 0.0 } else { 0.5 };
        }
        return 1.0 - b.cdf(a.lo);
    }
    b.survival_integral(a.lo, a.hi) / a.width()
}

pub fn dominance_monte_carlo<R: Rng + ?Sized>(a: &UniformDist, b: &UniformDist, n: usize, rng: &mut R) -> f64 {
    let wins = (0..n).filter(|_| a.sample(rng) < b.sample(rng)).count();
    wins as f64 / n as f64
}

/// Published-style timing measurements a preset is fitted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPreset {
    pub name: String,
    pub full_latency: f64,
    pub ttfa: f64,
    pub horizon: usize,
}

impl TimingPreset {
    /// Timing model whose full latency and TTFA match the preset exactly.
    pub fn timing(&self, steps: usize, stream_close: f64) -> Result<TimingModel> {
        let (base, dt_ae) = TimingModel::fit(self.full_latency, self.ttfa, steps)?;
        Ok(TimingModel {
            dt_vlm: base,
            dt_ae,
            steps,
            stream_close,
            ..TimingModel::default()
        })
    }

    pub fn shape(&self, has: HasParams) -> ChunkShape {
        ChunkShape {
            horizon: self.horizon,
            has,
        }
    }
}

/// Close-out cost used by the reproduction presets: the gap between the first
/// two streamed packets measured on the fastest device.
pub const PRESET_STREAM_CLOSE: f64 = 8.1;

pub fn presets() -> Vec<TimingPreset> {
    let p = |name: &str, full, ttfa, horizon| TimingPreset {
        name: name.into(),
        full_latency: full,
        ttfa,
        horizon,
    };
    vec![
        p("pi05-rtx4090", 80.0, 62.1, 50),
        p("pi05-rtx4060", 303.3, 238.6, 50),
        p("xvla-rtx4090", 113.7, 44.8, 30),
        p("xvla-rtx4060", 399.5, 129.2, 30),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeRow {
    pub mode: ClientMode,
    pub ttfa_ms: f64,
    pub smin: usize,
    pub d: usize,
    pub expected_react_ms: f64,
    pub lo_ms: f64,
    pub hi_ms: f64,
    pub stall_fraction: f64,
    /// Sync's expected reaction divided by this mode's.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceRow {
    pub mode_a: ClientMode,
    pub mode_b: ClientMode,
    /// `P(reaction_a < reaction_b)`.
    pub p_faster: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub modes: Vec<ModeRow>,
    pub dominance: Vec<DominanceRow>,
}

impl Comparison {
    pub fn modes_csv(&self) -> String {
        let mut out = String::from("mode,ttfa_ms,smin,expected_react_ms,lo_ms,hi_ms,stall_fraction\n");
        for r in &self.modes {
            out += &format!(
                "{},{:.1},{},{:.1},{:.1},{:.1},{:.4}\n",
                r.mode, r.ttfa_ms, r.smin, r.expected_react_ms, r.lo_ms, r.hi_ms, r.stall_fraction
            );
        }
        out
    }

    pub fn dominance_csv(&self) -> String {
        let mut out = String::from("mode_a,mode_b,p_faster\n");
        for r in &self.dominance {
            out += &format!("{},{},{:.4}\n", r.mode_a, r.mode_b, r.p_faster);
        }
        out
    }

    pub fn row(&self, mode: ClientMode) -> Option<&ModeRow> {
        self.modes.iter().find(|r| r.mode == mode)
    }

    pub fn p_faster(&self, a: ClientMode, b: ClientMode) -> Option<f64> {
        self.dominance.iter().find(|r| r.mode_a == a && r.mode_b == b).map(|r| r.p_faster)
    }
}

/// Every mode at its own `s_min`, plus pairwise dominance (later modes against
/// earlier ones).
pub fn compare_modes(t: &TimingModel, shape: &ChunkShape, modes: &[ClientMode]) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut dists = Vec::new();
    for &mode in modes {
        let plan = delay_and_smin(t, mode, Some(shape))?;
        let dist = reaction_distribution(t, mode, plan.s_min, Some(shape))?;
        let l = infer_latency(t, mode);
        let stall = if mode.is_async() {
            0.0
        } else {
            l / (l + plan.s_min as f64 * t.dt_ctrl)
        };
        rows.push(ModeRow {
            mode,
            ttfa_ms: l,
            smin: plan.s_min,
            d: plan.d,
            expected_react_ms: dist.mean(),
            lo_ms: dist.lo,
            hi_ms: dist.hi,
            stall_fraction: stall,
            speedup: 1.0,
        });
        dists.push(dist);
    }
    if let Some(base) = rows.iter().find(|r| r.mode == ClientMode::Sync).map(|r| r.expected_react_ms) {
        for r in &mut rows {
            r.speedup = base / r.expected_react_ms;
        }
    }
    let mut dominance = Vec::new();
    for i in 0..modes.len() {
        for j in 0..i {
            dominance.push(DominanceRow {
                mode_a: modes[i],
                mode_b: modes[j],
                p_faster: dominance_probability(&dists[i], &dists[j]),
            });
        }
    }
    Ok(Comparison { modes: rows, dominance })
}

/// Where simulated target jumps happen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSpec {
    None,
    /// `count` events uniform over the run, leaving a tail long enough for
    /// the last one to be answered.
    Uniform { count: usize },
    /// An event exactly at every `every`-th inference trigger.
    AtTriggers { every: usize },
    Times(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: ClientMode,
    pub exec_horizon: usize,
    pub duration: f64,
    pub events: EventSpec,
    pub seed: u64,
    /// Keep every executed action (needed for behavioral reactions).
    pub record_actions: bool,
}

/// Where chunks come from. The timing model decides when they arrive either
/// way; a flow model only changes their contents.
pub enum PolicySource<'a> {
    Scripted,
    Flow(&'a FlowModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub start: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTrace {
    pub executed: Vec<ExecutedAction>,
    pub executed_count: usize,
    pub triggers: Vec<f64>,
    pub events: Vec<JumpEvent>,
    pub reactions: Vec<Reaction>,
    pub stalls: Vec<Stall>,
    pub elapsed: f64,
}

impl RunTrace {
    pub fn stall_fraction(&self) -> f64 {
        if self.elapsed <= 0.0 {
            return 0.0;
        }
        self.stalls.iter().map(|s| s.duration).sum::<f64>() / self.elapsed
    }

    pub fn protocol_reactions(&self) -> Vec<f64> {
        self.reactions.iter().map(|r| r.protocol).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Jump(usize),
    Tick(u64),
    SyncTrigger,
    SyncExec(usize),
}

#[derive(Debug, PartialEq, Eq)]
struct Queued {
    time: Time,
    seq: u64,
    kind: Kind,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, insertion order).
        other.time.cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct ActiveChunk {
    id: usize,
    trigger_tick: u64,
    obs_time: f64,
    actions: Array2<f64>,
    /// Absolute availability time per index; `None` if never produced.
    available: Vec<Option<f64>>,
    first_usable: usize,
}

struct ChunkLog {
    obs_time: f64,
    first_exec_available: Option<f64>,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    timing: &'a TimingModel,
    env: &'a EnvConfig,
    policy: &'a PolicySource<'a>,
    plan: DelayPlan,
    has: HasParams,
    horizon: usize,
    world: WorldState,
    queue: BinaryHeap<Queued>,
    seq: u64,
    rng: ChaCha8Rng,
    active: VecDeque<ActiveChunk>,
    log: Vec<ChunkLog>,
    trace: RunTrace,
    event_targets: Vec<[f64; 2]>,
    started: bool,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.queue.push(Queued {
            time: Time(time),
            seq: self.seq,
            kind,
        });
    }

    fn tick_time(&self, k: u64) -> f64 {
        k as f64 * self.timing.dt_ctrl
    }

    fn jump(&mut self, time: f64) {
        let target = sample_target(&mut self.rng, self.world.target, self.env.min_jump);
        self.world.target = target;
        self.trace.events.push(JumpEvent { time, target });
    }

    /// Capture an observation at `now` and schedule the resulting chunk.
    fn trigger(&mut self, now: f64, tick: u64) -> Result<()> {
        if let EventSpec::AtTriggers { every } = self.cfg.events {
            if every > 0 && self.trace.triggers.len() % every == 0 {
                self.jump(now);
            }
        }
        self.trace.triggers.push(now);
        let mode = self.cfg.mode;
        let s = self.cfg.exec_horizon;
        let d = if mode.is_async() { self.plan.d } else { 0 };
        let prefix: Option<Array2<f64>> = if mode.uses_prefix() && d > 0 {
            self.active.back().map(|c| c.actions.slice(s![s..s + d, ..]).to_owned())
        } else {
            None
        };
        let obs = self.world.observation();
        let (actions, fin): (Array2<f64>, Vec<Option<usize>>) = match (self.policy, mode) {
            (PolicySource::Scripted, ClientMode::Faster) => {
                let hit = self.has.hit_times(self.horizon, d)?;
                let mut fin = finalization_steps(&hit, self.timing.steps);
                truncate_after_stop(&mut fin, d, s);
                (expert_chunk(&self.world, self.horizon, self.env.gain, self.env.v_max).0, fin)
            }
            (PolicySource::Scripted, _) => (
                expert_chunk(&self.world, self.horizon, self.env.gain, self.env.v_max).0,
                vec![Some(self.timing.steps); self.horizon],
            ),
            (PolicySource::Flow(model), ClientMode::Faster) => {
                let p = prefix.clone().unwrap_or_else(|| self.fallback_prefix(d));
                let hit = self.has.hit_times(self.horizon, d)?;
                let (chunk, tr) = sample_with_hit_times(*model, &obs, p.view(), &hit, self.timing.steps, Some(s), false, &mut |_| {}, &mut self.rng)?;
                (chunk.0, tr.finalize_step)
            }
            (PolicySource::Flow(model), _) => {
                let p = prefix.clone().unwrap_or_else(|| Array2::zeros((0, model.action_dim())));
                let (chunk, _) = sample_constant(*model, &obs, self.timing.steps, p.view(), &mut self.rng)?;
                (chunk.0, vec![Some(self.timing.steps); self.horizon])
            }
        };
        let t = self.timing;
        let available = fin
            .iter()
            .map(|f| {
                f.map(|step| match mode {
                    ClientMode::Faster => now + t.dt_vlm + step as f64 * t.dt_ae + t.overhead,
                    _ => now + t.full_latency(),
                })
            })
            .collect();
        let id = self.log.len();
        self.log.push(ChunkLog {
            obs_time: now,
            first_exec_available: None,
        });
        self.active.push_back(ActiveChunk {
            id,
            trigger_tick: tick,
            obs_time: now,
            actions,
            available,
            first_usable: d,
        });
        while self.active.len() > 3 {
            self.active.pop_front();
        }
        Ok(())
    }

    /// The first streamed request has no previous chunk; condition on a hold
    /// still prefix.
    fn fallback_prefix(&self, d: usize) -> Array2<f64> {
        Array2::zeros((d, 2))
    }

    fn execute(&mut self, now: f64, chunk_idx: usize, index: usize) {
        let c = &self.active[chunk_idx];
        let action = [c.actions[[index, 0]], c.actions[[index, 1]]];
        let available = c.available[index].expect("only available actions execute");
        let (id, obs_time) = (c.id, c.obs_time);
        let log = &mut self.log[id];
        if log.first_exec_available.is_none() {
            log.first_exec_available = Some(available);
        }
        if self.cfg.record_actions {
            self.trace.executed.push(ExecutedAction {
                exec_time: now,
                available_time: available,
                obs_time,
                chunk_id: id as u64,
                action,
                position: self.world.position,
            });
        }
        self.trace.executed_count += 1;
        self.world.step(action);
        self.started = true;
    }

    /// Newest chunk with an available action for tick `k`, falling back to
    /// older ones.
    fn pick(&self, k: u64, now: f64) -> Option<(usize, usize)> {
        for (ci, c) in self.active.iter().enumerate().rev() {
            let Some(i) = k.checked_sub(c.trigger_tick + 1).map(|i| i as usize) else {
                continue;
            };
            if i < c.first_usable || i >= self.horizon {
                continue;
            }
            if matches!(c.available[i], Some(a) if a <= now + TICK_EPS) {
                return Some((ci, i));
            }
        }
        None
    }

    fn run(mut self) -> Result<RunTrace> {
        let dt = self.timing.dt_ctrl;
        let end = self.cfg.duration;
        match self.cfg.mode {
            ClientMode::Sync => self.push(0.0, Kind::SyncTrigger),
            _ => self.push(0.0, Kind::Tick(0)),
        }
        let mut sync_chunk_arrival = 0.0;
        while let Some(q) = self.queue.pop() {
            let now = q.time.0;
            if now > end {
                break;
            }
            match q.kind {
                Kind::Jump(i) => {
                    let target = self.event_targets[i];
                    self.world.target = target;
                    self.trace.events.push(JumpEvent { time: now, target });
                }
                Kind::Tick(k) => {
                    if k > 0 {
                        match self.pick(k, now) {
                            Some((ci, i)) => self.execute(now, ci, i),
                            None if self.started => self.trace.stalls.push(Stall { start: now, duration: dt }),
                            None => {}
                        }
                    }
                    if k % self.cfg.exec_horizon as u64 == 0 {
                        self.trigger(now, k)?;
                    }
                    let next = self.tick_time(k + 1);
                    self.push(next, Kind::Tick(k + 1));
                }
                Kind::SyncTrigger => {
                    self.trigger(now, 0)?;
                    let l = self.timing.full_latency();
                    self.trace.stalls.push(Stall { start: now, duration: l });
                    sync_chunk_arrival = now + l;
                    self.push(now + l, Kind::SyncExec(0));
                }
                Kind::SyncExec(m) => {
                    let ci = self.active.len() - 1;
                    self.execute(now, ci, m);
                    let next = sync_chunk_arrival + (m + 1) as f64 * dt;
                    if m + 1 < self.cfg.exec_horizon {
                        self.push(next, Kind::SyncExec(m + 1));
                    } else {
                        self.push(next, Kind::SyncTrigger);
                    }
                }
            }
        }
        self.trace.elapsed = end;
        self.finish_reactions()?;
        Ok(self.trace)
    }

    fn finish_reactions(&mut self) -> Result<()> {
        let log: Vec<(f64, Option<f64>)> = self.log.iter().map(|c| (c.obs_time, c.first_exec_available)).collect();
        let events = std::mem::take(&mut self.trace.events);
        let (answered, reactions) = measure_reactions(events, &log, &self.trace.executed, self.cfg.record_actions);
        self.trace.events = answered;
        self.trace.reactions = reactions;
        Ok(())
    }
}

/// Pairs each event with the first executed action planned from a later
/// observation. `chunks` holds `(obs_time, availability of its first executed
/// action)` in trigger order. Events nothing answered are dropped.
pub fn measure_reactions(
    events: Vec<JumpEvent>,
    chunks: &[(f64, Option<f64>)],
    executed: &[ExecutedAction],
    behavioral: bool,
) -> (Vec<JumpEvent>, Vec<Reaction>) {
    let mut reactions = Vec::with_capacity(events.len());
    let mut answered = Vec::with_capacity(events.len());
    for (n, ev) in events.iter().enumerate() {
        let start = chunks.partition_point(|c| c.0 < ev.time);
        let Some(avail) = chunks[start..].iter().find_map(|c| c.1) else { continue };
        let b = if behavioral {
            let until = events.get(n + 1).map_or(f64::INFINITY, |e| e.time);
            let from = executed.partition_point(|a| a.exec_time < ev.time);
            behavioral_reaction(&executed[from..], ev, until).ok().and_then(|r| r.behavioral)
        } else {
            None
        };
        reactions.push(Reaction {
            protocol: avail - ev.time,
            behavioral: b,
        });
        answered.push(*ev);
    }
    (answered, reactions)
}

/// Marks indices past the early-stop point as never produced.
fn truncate_after_stop(fin: &mut [Option<usize>], d: usize, s: usize) {
    let used = fin[d..d + s].iter().map(|f| f.unwrap_or(0)).max().unwrap_or(0);
    for f in fin.iter_mut() {
        if matches!(f, Some(step) if *step > used) {
            *f = None;
        }
    }
}

/// Deterministic event-driven run of one client mode.
///
/// Async and streaming clients tick on a fixed grid and request a new chunk
/// every `s` ticks; chunk index `i` of a request made at tick `k` is meant for
/// tick `k + 1 + i`. The sync client waits for each chunk, plays `s` actions
/// starting on arrival and then requests again. Reactions are measured from
/// each event to the availability of the first executed action computed from
/// a later observation.
pub fn simulate(
    env: &EnvConfig,
    policy: &PolicySource<'_>,
    timing: &TimingModel,
    shape: &ChunkShape,
    cfg: &SimConfig,
) -> Result<RunTrace> {
    timing.validate()?;
    let s = cfg.exec_horizon;
    if s == 0 || s > shape.horizon {
        return Err(Error::Infeasible(format!("execution horizon {s} outside [1, {}]", shape.horizon)));
    }
    if !(cfg.duration > 0.0) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let plan = delay_and_smin(timing, cfg.mode, Some(shape))?;
    if cfg.mode.is_async() && s < plan.s_min {
        return Err(Error::Infeasible(format!("s = {s} below s_min = {} for {}", plan.s_min, cfg.mode)));
    }
    if cfg.mode.is_async() && plan.d + s > shape.horizon {
        return Err(Error::Infeasible(format!("d = {} plus s = {s} exceeds H = {}", plan.d, shape.horizon)));
    }
    if let PolicySource::Flow(m) = policy {
        if m.horizon() != shape.horizon || m.obs_dim() != crate::env::OBS_DIM || m.action_dim() != crate::env::ACTION_DIM {
            return Err(Error::Config("flow model does not match the env / chunk shape".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let first_target = sample_target(&mut rng, start, env.min_jump);
    let mut sim = Sim {
        cfg,
        timing,
        env,
        policy,
        plan,
        has: shape.has,
        horizon: shape.horizon,
        world: WorldState::new(start, first_target),
        queue: BinaryHeap::new(),
        seq: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
        active: VecDeque::new(),
        log: Vec::new(),
        trace: RunTrace::default(),
        event_targets: Vec::new(),
        started: false,
    };

    let times: Vec<f64> = match &cfg.events {
        EventSpec::None | EventSpec::AtTriggers { .. } => Vec::new(),
        EventSpec::Times(t) => t.clone(),
        EventSpec::Uniform { count } => {
            let l = timing.full_latency();
            let guard = 3.0 * (l + (plan.d + s) as f64 * timing.dt_ctrl) + 2.0 * timing.dt_ctrl;
            if *count > 0 && cfg.duration <= guard {
                return Err(Error::Config(format!("duration {} too short for event placement (need > {guard:.1})", cfg.duration)));
            }
            let mut t: Vec<f64> = (0..*count).map(|_| rng.random_range(0.0..cfg.duration - guard)).collect();
            t.sort_by(f64::total_cmp);
            t
        }
    };
    let mut last = first_target;
    for (i, &t) in times.iter().enumerate() {
        last = sample_target(&mut rng, last, env.min_jump);
        sim.event_targets.push(last);
        sim.push(t, Kind::Jump(i));
    }
    sim.run()
}

/// Runs a mode with `count` uniformly placed events and returns the protocol
/// reaction samples.
pub fn reaction_samples(timing: &TimingModel, shape: &ChunkShape, mode: ClientMode, s: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
    let env = EnvConfig {
        horizon: shape.horizon,
        ..EnvConfig::default()
    };
    let cycle = match mode {
        ClientMode::Sync => timing.full_latency() + s as f64 * timing.dt_ctrl,
        _ => s as f64 * timing.dt_ctrl,
    };
    let cfg = SimConfig {
        mode,
        exec_horizon: s,
        duration: count as f64 * cycle * 0.5 + 20.0 * (cycle + timing.full_latency()),
        events: EventSpec::Uniform { count },
        seed,
        record_actions: false,
    };
    Ok(simulate(&env, &PolicySource::Scripted, timing, shape, &cfg)?.protocol_reactions())
}
