//! Command-line front end: `gen`, `train`, `serve` and `eval`.
//!
//! Flags override values from `--config`, which override defaults.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::acceptance::Acceptance;
use crate::config::RunConfig;
use crate::engine::EmaClock;
use crate::run::{eval_artifacts, gen, train, TrainOptions};
use crate::server::Server;

#[derive(Debug, Parser)]
#[command(name = "streamvq", version, about = "Streaming vector-quantized retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and event stream.
    Gen(Common),
    /// Train over an event file and publish snapshots.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many events, leaving a checkpoint.
        #[arg(long)]
        max_events: Option<u64>,
    },
    /// Answer JSON queries against the newest snapshot.
    Serve(Common),
    /// Check run artifacts and run acceptance criteria.
    Eval(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockArg {
    Event,
    Batch,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub snapshot_cadence: Option<u64>,
    #[arg(long)]
    pub probe: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub target_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub disturbance: Option<Switch>,
    #[arg(long)]
    pub candidate_ratio: Option<f64>,
    #[arg(long)]
    pub logq: Option<Switch>,
    /// Turn the similarity loss on with weight 1 and the auxiliary loss
    /// off, or restore the defaults.
    #[arg(long)]
    pub ablation_lsim: Option<Switch>,
    #[arg(long)]
    pub ema_clock: Option<ClockArg>,
    /// `host:port` for `serve`; standard input otherwise.
    #[arg(long)]
    pub listen: Option<String>,
    /// Acceptance criterion to run during `eval`; repeatable.
    #[arg(long = "criterion")]
    pub criteria: Vec<usize>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = &self.events {
            c.events = Some(v.clone());
        }
        if let Some(v) = self.snapshot_cadence {
            c.snapshot_cadence = v;
        }
        if let Some(v) = self.probe {
            c.serve.probe = v;
        }
        if let Some(v) = self.chunk {
            c.serve.chunk = v;
        }
        if let Some(v) = self.target_size {
            c.serve.target_size = v;
        }
        if let Some(v) = self.beta {
            c.train.beta = v;
        }
        if let Some(v) = self.disturbance {
            c.train.disturbance = v.into();
        }
        if let Some(v) = self.candidate_ratio {
            c.stream.candidate_ratio = v;
        }
        if let Some(v) = self.logq {
            c.train.logq = v.into();
        }
        if let Some(v) = self.ablation_lsim {
            let w = &mut c.train.loss_weights;
            if v == Switch::On {
                w.aux = 0.0;
                w.sim = 1.0;
            } else {
                w.aux = 1.0;
                w.sim = 0.0;
            }
        }
        if let Some(v) = self.ema_clock {
            c.train.ema_clock = match v {
                ClockArg::Event => EmaClock::Event,
                ClockArg::Batch => EmaClock::Batch,
            };
        }
        if let Some(v) = &self.listen {
            c.serve.listen = Some(v.clone());
        }
        if !self.criteria.is_empty() {
            c.eval.criteria = self.criteria.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn run_eval(cfg: &RunConfig) -> Result<bool> {
    let mut ok = true;
    let has_artifacts = cfg.out.join("snapshots").is_dir();
    if has_artifacts {
        let res = eval_artifacts(cfg)?;
        let mut w = BufWriter::new(File::create(cfg.out.join("report.csv"))?);
        res.report.write_csv(&mut w)?;
        w.flush()?;
        println!("{}", res.report.summary());
        for f in &res.failures {
            println!("FAIL {f}");
        }
        ok &= res.passed();
    } else if cfg.eval.criteria.is_empty() {
        bail!(
            "no snapshots under {} and no criteria requested",
            cfg.out.display()
        );
    }
    if !cfg.eval.criteria.is_empty() {
        let mut acc = Acceptance::default();
        for &id in &cfg.eval.criteria {
            let o = acc.run(id);
            println!("{o}");
            ok &= o.passed;
        }
    }
    Ok(ok)
}

pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = c.resolve()?;
            let s = gen(&cfg)?;
            println!(
                "wrote {} items, {} users, {} events to {}",
                s.items,
                s.users,
                s.events,
                cfg.out.display()
            );
            Ok(true)
        }
        Command::Train {
            common,
            resume,
            max_events,
        } => {
            let cfg = common.resolve()?;
            let s = train(&cfg, &TrainOptions { resume, max_events })?;
            println!(
                "{} events, {} impressions, {} snapshots written{}",
                s.events,
                s.impressions,
                s.snapshots.len(),
                if s.interrupted { " (stopped early)" } else { "" }
            );
            Ok(true)
        }
        Command::Serve(c) => {
            let cfg = c.resolve()?;
            let server = Arc::new(Server::open(&cfg.out, cfg.serve.clone()));
            match &cfg.serve.listen {
                Some(addr) => server.serve_tcp(addr.as_str())?,
                None => server.serve_lines(io::stdin().lock(), io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Eval(c) => run_eval(&c.resolve()?),
    }
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
