use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use socnav_core::autoencoder::{train_autoencoder, AutoencoderConfig};
use socnav_core::forecast::{evaluate, history_windows, Forecaster, ForecastRecipe};
use socnav_core::gat::train_predictor;
use socnav_core::gesture::{classify, GestureReferences, HandLandmarks, DEFAULT_THRESHOLD};
use socnav_core::io::{load_trajnet, load_weights, pack_scenes, save_weights, scene_trajectories, write_trajnet, DEFAULT_FPS};
use socnav_core::sim::{load_scenario, run_episode, ScriptEntry};
use socnav_core::synth::{crossing_scenes, CrossingParams};

use crate::server::{self, AppState, Session, PORT_ENV};

#[derive(Debug, Parser)]
#[command(name = "socnav", version, about = "Socially aware robot navigation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario headless, or serve it over HTTP with --serve.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// JSON array of {tick, class} or {tick, landmarks}.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Episode log destination.
        #[arg(long, default_value = "episode.jsonl")]
        log: PathBuf,
        #[arg(long)]
        serve: bool,
        #[arg(long, env = PORT_ENV, default_value_t = server::DEFAULT_PORT)]
        port: u16,
        /// Simulated seconds per wall-clock second when serving.
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
    },
    /// Write synthetic crossing scenes as a trajectory file.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    TrainAutoencoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    TrainPredictor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lstm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// ADE/FDE/RME of the model against the constant-velocity baseline.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lstm: PathBuf,
        #[arg(long)]
        gat: PathBuf,
        #[arg(long, default_value_t = 9)]
        obs: usize,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
    },
    ClassifyGesture {
        /// JSON array of 21 [x, y, z] points, or an object with a `landmarks` field.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_scenes(path: &Path) -> anyhow::Result<Vec<Vec<socnav_core::geom::Trajectory>>> {
    Ok(scene_trajectories(&load_trajnet(path)?))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { scenario, script, seed, log, serve, port, speedup } => {
            let (mut config, forecaster) = load_scenario(&scenario)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let script: Vec<ScriptEntry> = match script {
                Some(p) => serde_json::from_str(&read(&p)?).with_context(|| format!("parsing script {}", p.display()))?,
                None => Vec::new(),
            };
            if serve {
                if !(speedup > 0.0) {
                    bail!("--speedup must be positive");
                }
                let period = Duration::from_secs_f64(config.dt / speedup);
                let dir = scenario.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
                let state = AppState::new(Session::new(config, forecaster, dir, script));
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(async {
                    let listener = server::bind(port).await?;
                    server::serve(listener, state.clone(), period).await
                })?;
                let mut text = state.lock().world().log_lines().join("\n");
                text.push('\n');
                std::fs::write(&log, text).with_context(|| format!("writing {}", log.display()))?;
                return Ok(());
            }
            let report = run_episode(config, forecaster, &script);
            let mut text = report.log.join("\n");
            text.push('\n');
            std::fs::write(&log, text).with_context(|| format!("writing {}", log.display()))?;
            println!(
                "status: {}\nticks: {}\nmin distance: {:.3}\nlog: {}",
                serde_json::to_value(report.status)?.as_str().unwrap_or("?"),
                report.ticks,
                report.min_distance,
                log.display()
            );
            Ok(())
        }
        Command::GenerateData { out, scenes, seed } => {
            let s = crossing_scenes(scenes, &CrossingParams::default(), seed);
            std::fs::write(&out, write_trajnet(&pack_scenes(&s, DEFAULT_FPS))).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {scenes} scenes to {}", out.display());
            Ok(())
        }
        Command::TrainAutoencoder { data, out, epochs, seed } => {
            let recipe = ForecastRecipe::default();
            let scenes = load_scenes(&data)?;
            let windows = history_windows(&scenes, recipe.predictor.window, recipe.max_windows, recipe.seed);
            let cfg = AutoencoderConfig {
                epochs: epochs.unwrap_or(recipe.autoencoder.epochs),
                seed: seed.unwrap_or(recipe.autoencoder.seed),
                ..recipe.autoencoder
            };
            let (w, history) = train_autoencoder(&windows, &cfg)?;
            save_weights(&w, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("trained on {} windows, final loss {:.6}", windows.len(), history.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::TrainPredictor { data, lstm, out, epochs, seed } => {
            let recipe = ForecastRecipe::default();
            let scenes = load_scenes(&data)?;
            let lstm = load_weights(&lstm)?;
            let cfg = socnav_core::gat::GatConfig {
                epochs: epochs.unwrap_or(recipe.predictor.epochs),
                seed: seed.unwrap_or(recipe.predictor.seed),
                ..recipe.predictor
            };
            let (w, history) = train_predictor(&scenes, &lstm, &cfg)?;
            save_weights(&w, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("trained on {} scenes, final loss {:.6}", scenes.len(), history.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Evaluate { data, lstm, gat, obs, horizon } => {
            let scenes = load_scenes(&data)?;
            let model = Forecaster::Gat { gat: load_weights(&gat)?, lstm: load_weights(&lstm)? };
            let r = evaluate(&model, &scenes, obs, horizon)?;
            println!("{:<18} {:>8} {:>8} {:>8}", "model", "ADE", "FDE", "RME");
            for (name, e) in [("gat", r.model), ("constant_velocity", r.baseline)] {
                println!("{name:<18} {:>8.4} {:>8.4} {:>8.4}", e.ade, e.fde, e.rme);
            }
            println!("people: {}", r.people);
            Ok(())
        }
        Command::ClassifyGesture { landmarks, threshold } => {
            let v: serde_json::Value = serde_json::from_str(&read(&landmarks)?)?;
            let v = match v {
                serde_json::Value::Object(mut m) => m.remove("landmarks").context("object has no `landmarks` field")?,
                other => other,
            };
            let h: HandLandmarks = serde_json::from_value(v)?;
            println!("{}", classify(&h, &GestureReferences::builtin(), threshold)?);
            Ok(())
        }
    }
}

/// Parses arguments and runs; usage errors exit 2, domain errors 1.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
