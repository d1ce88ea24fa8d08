//! The `hflow` command line. Every subcommand writes into `<out>/<run>/`
//! together with a `manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::env::{generate_dataset, load_dataset, EnvConfig, OBS_DIM};
use crate::flow::{evaluation_loss, sample_constant, sample_has, train, FlowModel, Normalization, PilotReport, VelocityField};
use crate::pipeline::{
    compare_modes, delay_and_smin, presets, simulate, ChunkShape, ClientMode, EventSpec, PolicySource, SimConfig,
    TimingModel, PRESET_STREAM_CLOSE,
};
use crate::wire::{run_client, ClientConfig, Server, ServerConfig, SharedField};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hflow", version, about = "Horizon-aware flow policies: training, sampling, latency analysis and streaming")]
pub struct Cli {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output root; artifacts go to `<out>/<run>/`.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run name, defaults to the subcommand name.
    #[arg(long, global = true)]
    pub run: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations as JSON Lines.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a flow policy on a demonstration file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Share of records held out for evaluation.
        #[arg(long, default_value_t = 0.05)]
        holdout: f64,
    },
    /// Sample one chunk from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SamplerKind::Has)]
        sampler: SamplerKind,
        /// Observation `px,py,tx,ty`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.5, 0.5])]
        obs: Vec<f64>,
        /// Prefix length; the prefix holds still (zero actions).
        #[arg(long, default_value_t = 0)]
        d: usize,
        /// Execution horizon for early stopping (horizon-aware sampler only).
        #[arg(long)]
        s: Option<usize>,
    },
    /// Straightness and clean-estimate deviation per index.
    Pilot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        holdout: f64,
    },
    /// Discrete-event simulation of one client mode.
    Simulate {
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, default_value = "faster")]
        mode: ClientMode,
        /// Execution horizon, defaults to the mode's s_min.
        #[arg(long)]
        s: Option<usize>,
        /// Uniformly placed target jumps.
        #[arg(long, default_value_t = 100)]
        events: usize,
        /// Simulated milliseconds; sized from the event count if absent.
        #[arg(long)]
        duration: Option<f64>,
        /// Sample chunks from this model instead of the scripted expert.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic comparison of sync, async and streaming clients.
    Compare {
        #[command(flatten)]
        timing: TimingArgs,
    },
    /// Run the policy server.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        addr: Option<String>,
    },
    /// Run a real-time client against a server.
    Client {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long, default_value = "faster")]
        mode: ClientMode,
        #[arg(long)]
        s: Option<usize>,
        /// Override the computed delay d.
        #[arg(long)]
        d: Option<usize>,
        /// Wall-clock milliseconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Where to write executed actions (JSON Lines).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Reaction tables for the four measured deployments.
    Reproduce {
        /// Write table2.csv and table3.csv (the default action).
        #[arg(long)]
        tables: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Has,
    Constant,
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    /// Use a measured deployment (`pi05-rtx4090`, `pi05-rtx4060`,
    /// `xvla-rtx4090`, `xvla-rtx4060`) instead of the config timing.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    run: &'a str,
    seed: u64,
    config_sha256: String,
    version: &'static str,
    args: Vec<String>,
    config: &'a Config,
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn create(cli: &Cli, name: &str, cfg: &Config, args: &[String]) -> Result<Self> {
        let run = cli.run.clone().unwrap_or_else(|| name.to_string());
        let dir = cli.out.join(&run);
        fs::create_dir_all(&dir)?;
        let manifest = Manifest {
            command: name,
            run: &run,
            seed: cli.seed,
            config_sha256: cfg.hash(),
            version: env!("CARGO_PKG_VERSION"),
            args: args.to_vec(),
            config: cfg,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf> {
        self.write(name, &(serde_json::to_string_pretty(v)? + "\n"))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Sample { .. } => "sample",
        Command::Pilot { .. } => "pilot",
        Command::Simulate { .. } => "simulate",
        Command::Compare { .. } => "compare",
        Command::Serve { .. } => "serve",
        Command::Client { .. } => "client",
        Command::Reproduce { .. } => "reproduce",
    }
}

/// Timing and chunk shape from a preset or from the config.
fn resolve_timing(args: &TimingArgs, cfg: &Config) -> Result<(TimingModel, ChunkShape, String)> {
    match &args.preset {
        Some(name) => {
            let p = presets()
                .into_iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            let t = TimingModel {
                delay_pad: cfg.timing.delay_pad,
                smin_pad: cfg.timing.smin_pad,
                ..p.timing(cfg.schedule.steps, PRESET_STREAM_CLOSE)?
            };
            Ok((t, p.shape(cfg.schedule.has()), p.name))
        }
        None => Ok((cfg.timing, cfg.shape(), "config".into())),
    }
}

fn load_checkpoint(path: &Path, cfg: &Config) -> Result<FlowModel> {
    let m = FlowModel::load(path)?;
    if m.horizon() != cfg.env.horizon {
        return Err(Error::Config(format!(
            "checkpoint horizon {} differs from env.horizon {}",
            m.horizon(),
            cfg.env.horizon
        )));
    }
    Ok(m)
}

pub fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.train.seed = cli.seed;
    let name = command_name(&cli.command);

    match &cli.command {
        Command::GenData { episodes } => {
            if let Some(e) = episodes {
                cfg.env.episodes = *e;
            }
            cfg.validate()?;
            let run = Run::create(cli, name, &cfg, args)?;
            let path = run.dir.join("demos.jsonl");
            let n = generate_dataset(&cfg.env, cli.seed, &path)?;
            println!("wrote {n} records to {}", path.display());
        }
        Command::Train { data, epochs, holdout } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cfg.validate()?;
            let run = Run::create(cli, name, &cfg, args)?;
            let (header, ds) = load_dataset(data)?;
            if header.env.horizon != cfg.env.horizon {
                return Err(Error::Config(format!(
                    "dataset horizon {} differs from env.horizon {}",
                    header.env.horizon, cfg.env.horizon
                )));
            }
            let (tr, te) = ds.split(*holdout);
            if te.len() == 0 {
                return Err(Error::Config("holdout leaves no evaluation records".into()));
            }
            let init = {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                FlowModel::new(ds.horizon(), ds.action_dim(), ds.obs_dim(), &cfg.train.hidden, Normalization::fit(&tr), &mut rng)?
            };
            let init_loss = evaluation_loss(&init, &te, cli.seed)?;
            let mut log = String::from("epoch,mean_loss\n");
            let model = train(&tr, &cfg.train, |s| {
                log += &format!("{},{}\n", s.epoch, s.mean_loss);
                println!("epoch {} loss {:.4}", s.epoch, s.mean_loss);
            })?;
            let final_loss = evaluation_loss(&model, &te, cli.seed)?;
            model.save(&run.dir.join("checkpoint.bin"))?;
            run.write("train.csv", &log)?;
            #[derive(Serialize)]
            struct Summary {
                train_records: usize,
                eval_records: usize,
                init_eval_loss: f64,
                final_eval_loss: f64,
                reduction: f64,
            }
            run.write_json(
                "summary.json",
                &Summary {
                    train_records: tr.len(),
                    eval_records: te.len(),
                    init_eval_loss: init_loss,
                    final_eval_loss: final_loss,
                    reduction: init_loss / final_loss,
                },
            )?;
            println!("held-out loss {init_loss:.4} -> {final_loss:.4} ({:.1}x)", init_loss / final_loss);
        }
        Command::Sample {
            checkpoint,
            sampler,
            obs,
            d,
            s,
        } => {
            cfg.validate()?;
            if obs.len() != OBS_DIM {
                return Err(Error::Config(format!("--obs needs {OBS_DIM} values, got {}", obs.len())));
            }
            let run = Run::create(cli, name, &cfg, args)?;
            let model = load_checkpoint(checkpoint, &cfg)?;
            let prefix = Array2::<f64>::zeros((*d, model.action_dim()));
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let (chunk, trace) = match sampler {
                SamplerKind::Constant => sample_constant(&model, obs, cfg.schedule.steps, prefix.view(), &mut rng)?,
                SamplerKind::Has => {
                    let mut sc = cfg.schedule.sampler(s.unwrap_or(model.horizon() - d));
                    sc.early_stop = s.is_some();
                    sample_has(&model, obs, prefix.view(), &sc, &mut |_| {}, &mut rng)?
                }
            };
            let mut csv = String::from("index,x,y,finalize_step\n");
            for (i, row) in chunk.0.rows().into_iter().enumerate() {
                let f = trace.finalize_step[i].map_or(String::new(), |j| j.to_string());
                csv += &format!("{i},{},{},{f}\n", row[0], row[1]);
            }
            let path = run.write("chunk.csv", &csv)?;
            println!("steps used {} (early stop: {}); wrote {}", trace.steps_used, trace.early_stopped, path.display());
        }
        Command::Pilot {
            checkpoint,
            data,
            samples,
            holdout,
        } => {
            cfg.validate()?;
            let run = Run::create(cli, name, &cfg, args)?;
            let model = load_checkpoint(checkpoint, &cfg)?;
            let (_, ds) = load_dataset(data)?;
            let (_, te) = ds.split(*holdout);
            if te.len() < *samples || *samples == 0 {
                return Err(Error::Config(format!("need {samples} held-out records, have {}", te.len())));
            }
            let stride = te.len() / samples;
            let obs: Vec<Vec<f64>> = (0..*samples).map(|i| te.obs.row(i * stride).to_vec()).collect();
            let report = PilotReport::run(&model, &obs, cfg.schedule.steps, cli.seed)?;
            run.write("straightness.csv", &report.straightness_csv())?;
            run.write("deviation.csv", &report.deviation_csv())?;
            let (st, dv) = (report.straightness_trend(0.2), report.deviation_trend(0.2));
            #[derive(Serialize)]
            struct Summary {
                samples: usize,
                straightness: crate::flow::Trend,
                straightness_margin: f64,
                deviation_step1: crate::flow::Trend,
                deviation_margin: f64,
            }
            run.write_json(
                "summary.json",
                &Summary {
                    samples: *samples,
                    straightness: st,
                    straightness_margin: st.margin(),
                    deviation_step1: dv,
                    deviation_margin: dv.margin(),
                },
            )?;
            println!(
                "straightness early {:.4} late {:.4}; step-1 deviation early {:.4} late {:.4}",
                st.early, st.late, dv.early, dv.late
            );
        }
        Command::Simulate {
            timing,
            mode,
            s,
            events,
            duration,
            checkpoint,
        } => {
            cfg.validate()?;
            let (t, shape, source) = resolve_timing(timing, &cfg)?;
            let run = Run::create(cli, name, &cfg, args)?;
            let plan = delay_and_smin(&t, *mode, Some(&shape))?;
            let s = s.unwrap_or(plan.s_min);
            let cycle = t.full_latency() + s as f64 * t.dt_ctrl;
            let duration = duration.unwrap_or(((*events).max(10) as f64 + 10.0) * cycle);
            let model = checkpoint.as_ref().map(|p| load_checkpoint(p, &cfg)).transpose()?;
            let policy = match &model {
                Some(m) => PolicySource::Flow(m),
                None => PolicySource::Scripted,
            };
            let env = EnvConfig {
                horizon: shape.horizon,
                ..cfg.env.clone()
            };
            let sim = SimConfig {
                mode: *mode,
                exec_horizon: s,
                duration,
                events: if *events == 0 { EventSpec::None } else { EventSpec::Uniform { count: *events } },
                seed: cli.seed,
                record_actions: true,
            };
            let trace = simulate(&env, &policy, &t, &shape, &sim)?;
            let mut csv = String::from("event_ms,protocol_ms,behavioral_ms\n");
            for (e, r) in trace.events.iter().zip(&trace.reactions) {
                let b = r.behavioral.map_or(String::new(), |b| b.to_string());
                csv += &format!("{},{},{b}\n", e.time, r.protocol);
            }
            run.write("reactions.csv", &csv)?;
            write_jsonl(&run.dir.join("trace.jsonl"), &trace.executed)?;
            let protocol = trace.protocol_reactions();
            let mean = if protocol.is_empty() {
                None
            } else {
                Some(protocol.iter().sum::<f64>() / protocol.len() as f64)
            };
            #[derive(Serialize)]
            struct Summary {
                timing_source: String,
                mode: ClientMode,
                s: usize,
                d: usize,
                duration_ms: f64,
                reactions: usize,
                mean_reaction_ms: Option<f64>,
                stall_fraction: f64,
                executed: usize,
            }
            let summary = Summary {
                timing_source: source,
                mode: *mode,
                s,
                d: plan.d,
                duration_ms: duration,
                reactions: protocol.len(),
                mean_reaction_ms: mean,
                stall_fraction: trace.stall_fraction(),
                executed: trace.executed_count,
            };
            run.write_json("summary.json", &summary)?;
            println!(
                "{mode}: s = {s}, {} reactions, mean {:?} ms, stall fraction {:.4}",
                summary.reactions, summary.mean_reaction_ms, summary.stall_fraction
            );
        }
        Command::Compare { timing } => {
            cfg.validate()?;
            let (t, shape, _) = resolve_timing(timing, &cfg)?;
            let run = Run::create(cli, name, &cfg, args)?;
            let cmp = compare_modes(&t, &shape, &[ClientMode::Sync, ClientMode::AsyncNaive, ClientMode::Faster])?;
            run.write("modes.csv", &cmp.modes_csv())?;
            run.write("dominance.csv", &cmp.dominance_csv())?;
            print!("{}{}", cmp.modes_csv(), cmp.dominance_csv());
        }
        Command::Serve { checkpoint, addr } => {
            cfg.validate()?;
            let model = load_checkpoint(checkpoint, &cfg)?;
            let addr = addr.clone().unwrap_or_else(|| cfg.wire.addr.clone());
            let server = Server::bind(
                &addr,
                Arc::new(model) as SharedField,
                ServerConfig {
                    dt_vlm_ms: cfg.timing.dt_vlm + cfg.timing.overhead,
                    dt_ae_ms: cfg.timing.dt_ae,
                    steps: cfg.schedule.steps,
                    has: cfg.schedule.has(),
                    seed: cli.seed,
                },
            )?;
            println!("serving on {}", server.local_addr()?);
            server.run()?;
        }
        Command::Client {
            addr,
            mode,
            s,
            d,
            duration,
            trace,
        } => {
            cfg.validate()?;
            let run = Run::create(cli, name, &cfg, args)?;
            let addr = addr.clone().unwrap_or_else(|| cfg.wire.addr.clone());
            let cc = ClientConfig {
                mode: *mode,
                exec_horizon: *s,
                delay: *d,
                duration_ms: duration.unwrap_or(cfg.wire.duration_ms),
                events: if cfg.wire.events == 0 {
                    EventSpec::None
                } else {
                    EventSpec::Uniform { count: cfg.wire.events }
                },
                seed: cli.seed,
                record_actions: true,
            };
            let report = run_client(addr.as_str(), &cfg.timing, &cc)?;
            let path = trace.clone().unwrap_or_else(|| run.dir.join("trace.jsonl"));
            write_jsonl(&path, &report.trace.executed)?;
            #[derive(Serialize)]
            struct Summary {
                mode: ClientMode,
                s: usize,
                d: usize,
                requests: usize,
                mean_ttfa_ms: f64,
                reactions: usize,
                mean_reaction_ms: f64,
                stalls: usize,
                late_actions: usize,
                truncated: bool,
            }
            let summary = Summary {
                mode: report.mode,
                s: report.exec_horizon,
                d: report.delay,
                requests: report.trace.triggers.len(),
                mean_ttfa_ms: report.mean_ttfa(),
                reactions: report.trace.reactions.len(),
                mean_reaction_ms: report.mean_reaction(),
                stalls: report.trace.stalls.len(),
                late_actions: report.late_actions,
                truncated: report.truncated,
            };
            run.write_json("summary.json", &summary)?;
            println!(
                "{}: TTFA {:.1} ms, mean reaction {:.1} ms, {} stalls",
                summary.mode, summary.mean_ttfa_ms, summary.mean_reaction_ms, summary.stalls
            );
        }
        Command::Reproduce { tables: _ } => {
            cfg.validate()?;
            let run = Run::create(cli, name, &cfg, args)?;
            let (t2, t3) = reproduce_tables(&cfg)?;
            run.write("table2.csv", &t2)?;
            run.write("table3.csv", &t3)?;
            print!("{t2}\n{t3}");
        }
    }
    Ok(())
}

/// Per-preset reaction rows and dominance pairs as two CSV documents.
pub fn reproduce_tables(cfg: &Config) -> Result<(String, String)> {
    let mut t2 = String::from("preset,mode,ttfa_ms,smin,expected_react_ms,lo_ms,hi_ms,stall_fraction,speedup\n");
    let mut t3 = String::from("preset,mode_a,mode_b,p_faster\n");
    for p in presets() {
        let t = p.timing(cfg.schedule.steps, PRESET_STREAM_CLOSE)?;
        let cmp = compare_modes(&t, &p.shape(cfg.schedule.has()), &[ClientMode::Sync, ClientMode::AsyncNaive, ClientMode::Faster])?;
        for r in &cmp.modes {
            t2 += &format!(
                "{},{},{:.1},{},{:.1},{:.1},{:.1},{:.4},{:.2}\n",
                p.name, r.mode, r.ttfa_ms, r.smin, r.expected_react_ms, r.lo_ms, r.hi_ms, r.stall_fraction, r.speedup
            );
        }
        for r in &cmp.dominance {
            t3 += &format!("{},{},{},{:.2}\n", p.name, r.mode_a, r.mode_b, r.p_faster);
        }
    }
    Ok((t2, t3))
}

/// Parses, runs and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let shown: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &shown) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
