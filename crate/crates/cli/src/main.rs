use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use contime::data::{CsvSchema, SynthConfig};
use contime::model::Checkpoint;
use contime::ode::SolverConfig;
use contime::run::{self, DataSource, EvalRequest, RunConfig, Split};
use contime::training::LossMode;

#[derive(Parser)]
#[command(name = "contime", version, about = "Continuous-time GRU forecaster with delay-aware evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split, keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score checkpoints (one per seed) on a split and write a report plus traces.
    Eval(EvalArgs),
    /// Put two or more reports side by side.
    Compare(CompareArgs),
    /// Forecast P steps after a T-row CSV window.
    Forecast(ForecastArgs),
    /// Write the synthetic regime-flip series as CSV.
    Synth(SynthArgs),
    /// Write the train/val/test windows of a dataset as CSV.
    Windows(WindowsArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file: header row, date first, numeric features after.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic series instead of a CSV.
    #[arg(long)]
    synth: bool,
    #[arg(long, default_value_t = 3000)]
    synth_length: usize,
    #[arg(long, default_value_t = 8)]
    synth_period: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    /// Date column name (defaults to the first column).
    #[arg(long)]
    date_column: Option<String>,
    /// Comma-separated feature columns (defaults to all but the date).
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
}

impl DataArgs {
    fn source(&self) -> Option<DataSource> {
        if self.synth {
            Some(DataSource::Synth(SynthConfig::new(
                self.synth_length,
                self.synth_period,
                self.synth_seed,
            )))
        } else {
            self.data.as_ref().map(|path| DataSource::Csv {
                path: path.clone(),
                schema: CsvSchema {
                    date_column: self.date_column.clone(),
                    features: self.features.clone(),
                },
            })
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags given here override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Input window length T.
    #[arg(long)]
    input_len: Option<usize>,
    /// Forecast horizon P.
    #[arg(long)]
    pred_len: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Learning rate λ.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    solver_step: Option<f64>,
    /// Delay τ between lag refreshes (defaults to the solver step).
    #[arg(long)]
    lag_interval: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Soft-DTW temperature for task-tdi.
    #[arg(long)]
    gamma: Option<f64>,
    /// task-only, task-delta or task-tdi.
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long, overrides_with = "no_shift")]
    shift: bool,
    #[arg(long, overrides_with = "shift")]
    no_shift: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_stride: Option<usize>,
    /// Record per-epoch wall time in the history (makes it run-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.data.source()) {
            (Some(path), src) => {
                let mut c = RunConfig::from_json_file(path)?;
                if let Some(src) = src {
                    c.data = src;
                }
                c
            }
            (None, Some(src)) => RunConfig::new(src),
            (None, None) => bail!("no data: pass --data FILE, --synth or --config FILE"),
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.input_len, t.input_len);
        set!(self.pred_len, t.pred_len);
        set!(self.lr, t.learning_rate);
        set!(self.hidden_dim, t.hidden_dim);
        set!(self.seed, t.seed);
        set!(self.epochs, t.epochs);
        set!(self.batch_size, t.batch_size);
        set!(self.alpha, cfg.loss.alpha);
        set!(self.beta, cfg.loss.beta);
        set!(self.gamma, cfg.loss.gamma);
        set!(self.loss_mode, cfg.loss.mode);
        set!(self.train_stride, cfg.train_stride);
        set!(self.out.clone(), cfg.out_dir);
        if let Some(step) = self.solver_step {
            cfg.train.solver = SolverConfig {
                step,
                ..cfg.train.solver
            };
        }
        if self.lag_interval.is_some() {
            cfg.train.solver.lag_interval = self.lag_interval;
        }
        if self.shift {
            cfg.train.shift = true;
        }
        if self.no_shift {
            cfg.train.shift = false;
        }
        if self.timing {
            cfg.train.record_wall_time = true;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; repeat for several seeds.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Fail unless the checkpoints forecast this horizon.
    #[arg(long)]
    pred_len: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Report file name (defaults to the first checkpoint's stem).
    #[arg(long)]
    name: Option<String>,
    /// Keep per-window metrics in the report.
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Report files written by `eval`.
    #[arg(required = true, num_args = 2..)]
    reports: Vec<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with exactly T rows and the checkpoint's feature columns.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3000)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    period: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chance of a regime change at each zero crossing.
    #[arg(long, default_value_t = 0.2)]
    flip_prob: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WindowsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 60)]
    input_len: usize,
    #[arg(long, default_value_t = 24)]
    pred_len: usize,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let a = run::cmd_train(&cfg)?;
            println!("best epoch {} of {}", a.outcome.best_epoch, a.outcome.history.len());
            println!("checkpoint {}", a.checkpoint.display());
            println!("history {}", a.history.display());
            println!("config {}", a.config.display());
        }
        Command::Eval(args) => {
            let data = args
                .data
                .source()
                .context("no data: pass --data FILE or --synth")?;
            let a = run::cmd_eval(&EvalRequest {
                checkpoints: args.checkpoint,
                data,
                split: args.split,
                pred_len: args.pred_len,
                out_dir: args.out,
                name: args.name,
                keep_samples: args.per_sample,
            })?;
            let m = &a.report.per_metric;
            println!(
                "TDI {:.4} ± {:.4}  DTW {:.4} ± {:.4}  MSE {:.4} ± {:.4}",
                m.tdi.mean, m.tdi.std, m.dtw.mean, m.dtw.std, m.mse.mean, m.mse.std
            );
            println!("report {}", a.report_path.display());
            for t in &a.traces {
                println!("trace {}", t.display());
            }
        }
        Command::Compare(args) => {
            let cmp = run::cmd_compare(&args.reports, args.json.as_deref())?;
            print!("{}", cmp.render());
        }
        Command::Forecast(args) => {
            let y = run::cmd_forecast(&args.checkpoint, &args.input, args.out.as_deref())?;
            if args.out.is_none() {
                let names = Checkpoint::load(&args.checkpoint)?.feature_names;
                run::write_forecast(std::io::stdout().lock(), &names, &y)?;
            }
        }
        Command::Synth(args) => {
            let cfg = SynthConfig {
                flip_prob: args.flip_prob,
                ..SynthConfig::new(args.length, args.period, args.seed)
            };
            run::cmd_synth(&cfg, &args.out)?;
            println!("wrote {}", args.out.display());
        }
        Command::Windows(args) => {
            let data = args
                .data
                .source()
                .context("no data: pass --data FILE or --synth")?;
            for p in run::cmd_dump_windows(&data, args.input_len, args.pred_len, &args.out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
