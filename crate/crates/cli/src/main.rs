//! `pvdisagg`: split a feeder's net power flow into PV generation and demand.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{MethodSection, RunConfig};
use crate::error::{kind_of, ErrorRecord};

#[derive(Parser)]
#[command(name = "pvdisagg", version, about = "Unsupervised PV generation and demand disaggregation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, env = "PVDISAGG_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transpose GHI onto every plane of the bank (bank.csv).
    Transpose(Inputs),
    /// Train capacities on a flow series (model.json).
    Fit {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        method: MethodFlags,
    },
    /// Estimate generation and demand with a trained model (estimates.csv).
    Disaggregate {
        #[command(flatten)]
        inputs: Inputs,
        /// Model written by `fit`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Cross-validated parameter sweep on files or on a synthetic scenario.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        /// Also run the penetration experiment with each method's best point.
        #[arg(long)]
        penetration: bool,
    },
    /// Generate a synthetic scenario with known ground truth.
    Synth {
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        period_s: Option<u32>,
        #[arg(long)]
        battery: bool,
    },
    /// Error metrics of an estimate against measured generation (metrics.json).
    Metrics {
        #[arg(long)]
        g_true: Option<PathBuf>,
        /// `timestamp,value` series or `disaggregate` output.
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        capacity_kwp: Option<f64>,
    },
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Net flow at the connection point, kW.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Global horizontal irradiance, W/m².
    #[arg(long)]
    ghi: Option<PathBuf>,
    /// Air temperature, °C.
    #[arg(long)]
    t_air: Option<PathBuf>,
    /// Measured generation, kW.
    #[arg(long)]
    g_true: Option<PathBuf>,
    #[arg(long)]
    capacity_kwp: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct MethodFlags {
    /// A, B, C or D.
    #[arg(long)]
    method: Option<String>,
    /// Training period; inputs are block-averaged to it.
    #[arg(long)]
    period_s: Option<u32>,
    #[arg(long)]
    lambda_kw: Option<f64>,
    #[arg(long)]
    c_samples: Option<usize>,
    #[arg(long, conflicts_with = "f_low_period_s")]
    f_low_hz: Option<f64>,
    #[arg(long, conflicts_with = "f_high_period_s")]
    f_high_hz: Option<f64>,
    #[arg(long)]
    f_low_period_s: Option<f64>,
    #[arg(long)]
    f_high_period_s: Option<f64>,
    #[arg(long)]
    irls_tuning: Option<f64>,
    /// W/m²; a negative value trains on night samples too.
    #[arg(long, allow_negative_numbers = true)]
    night_threshold_w_m2: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

impl Inputs {
    fn merge(self, cfg: &mut RunConfig) {
        let i = &mut cfg.inputs;
        i.flow_csv = self.flow.or(i.flow_csv.take());
        i.ghi_csv = self.ghi.or(i.ghi_csv.take());
        i.t_air_csv = self.t_air.or(i.t_air_csv.take());
        i.g_true_csv = self.g_true.or(i.g_true_csv.take());
        i.capacity_kwp = self.capacity_kwp.or(i.capacity_kwp);
    }
}

impl MethodFlags {
    fn merge(self, m: &mut MethodSection) {
        // A flag in one unit replaces a config value in the other.
        if self.f_low_hz.is_some() || self.f_low_period_s.is_some() {
            m.f_low_hz = self.f_low_hz;
            m.f_low_period_s = self.f_low_period_s;
        }
        if self.f_high_hz.is_some() || self.f_high_period_s.is_some() {
            m.f_high_hz = self.f_high_hz;
            m.f_high_period_s = self.f_high_period_s;
        }
        m.name = self.method.or(m.name.take());
        m.period_s = self.period_s.or(m.period_s);
        m.lambda_kw = self.lambda_kw.or(m.lambda_kw);
        m.c_samples = self.c_samples.or(m.c_samples);
        m.irls_tuning = self.irls_tuning.or(m.irls_tuning);
        m.night_threshold_w_m2 = self.night_threshold_w_m2.or(m.night_threshold_w_m2);
        m.tol = self.tol.or(m.tol);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.out_dir.is_some() {
        cfg.output_dir = cli.out_dir;
    }
    match cli.command {
        Command::Transpose(inputs) => {
            inputs.merge(&mut cfg);
            commands::transpose(&cfg)
        }
        Command::Fit { inputs, method } => {
            inputs.merge(&mut cfg);
            method.merge(&mut cfg.method);
            commands::fit(&cfg)
        }
        Command::Disaggregate { inputs, model } => {
            inputs.merge(&mut cfg);
            commands::disaggregate(&cfg, &model)
        }
        Command::Sweep { inputs, penetration } => {
            inputs.merge(&mut cfg);
            if penetration {
                cfg.sweep.penetration = Some(true);
            }
            commands::sweep(&cfg)
        }
        Command::Synth { days, period_s, battery } => {
            cfg.synth.days = days.or(cfg.synth.days);
            cfg.synth.period_s = period_s.or(cfg.synth.period_s);
            if battery {
                cfg.synth.battery = Some(true);
            }
            commands::synth(&cfg)
        }
        Command::Metrics { g_true, estimate, capacity_kwp } => {
            Inputs {
                g_true,
                capacity_kwp,
                ..Inputs::default()
            }
            .merge(&mut cfg);
            commands::metrics(&cfg, &estimate)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = kind_of(&e);
            let record = ErrorRecord {
                tool: "pvdisagg",
                version: env!("CARGO_PKG_VERSION"),
                exit_code: kind.exit_code(),
                kind,
                message: format!("{e:#}"),
            };
            eprintln!("{}", serde_json::to_string(&record).expect("serializable"));
            ExitCode::from(kind.exit_code())
        }
    }
}
