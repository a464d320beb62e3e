use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use cellfree_cli::commands::{self, Axis, SweepModels, CHECKPOINT_FILE, TEST_FILE};
use cellfree_cli::config::{Overrides, RunConfig};
use cellfree_cli::report;
use cellfree_cli::verify;
use cellfree_core::training::{mean, median};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cellfree",
    version,
    about = "Association-aware GNN precoding for cell-free MIMO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(short = 'K', long)]
    ues: Option<usize>,
    #[arg(short = 'M', long)]
    aps: Option<usize>,
    #[arg(short = 'N', long)]
    antennas: Option<usize>,
    /// Per-AP power budget, watts.
    #[arg(short = 'P', long)]
    power: Option<f64>,
    #[arg(long)]
    edge_snr_db: Option<f64>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short = 'L', long)]
    layers: Option<usize>,
    #[arg(short = 'F', long)]
    features: Option<usize>,
    /// Train the variant without attention.
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    gain_exponent: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let o = Overrides {
            n_ues: self.ues,
            n_aps: self.aps,
            n_antennas: self.antennas,
            power: self.power,
            edge_snr_db: self.edge_snr_db,
            train_samples: self.train_samples,
            test_samples: self.test_samples,
            data_seed: self.data_seed,
            seed: self.seed,
            layers: self.layers,
            features: self.features,
            no_attention: self.no_attention,
            gain_exponent: self.gain_exponent,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            eval_every: self.eval_every,
            out_dir: self.out.clone(),
            workers: self.workers,
        };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets plus a scenario sidecar.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run the property battery; exits nonzero on any failure.
    Verify,
    /// Train a model on `<data-dir>/train.cfds`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.cfds and test.cfds (default: the output directory).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint against WMMSE.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to evaluate (default: `<out>/test.cfds`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// WMMSE and MRT on every sample of a dataset.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Normalized sum rate over training-set size, K, N or M.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// samples, K, N or M.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (default: the configured range).
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Checkpoint of the attention model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint of the model without attention.
        #[arg(long)]
        checkpoint_woa: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Dimension of the equivariant weight space for (N, M, K).
    Commutant {
        #[arg(short = 'N')]
        n: usize,
        #[arg(short = 'M')]
        m: usize,
        #[arg(short = 'K')]
        k: usize,
    },
}

fn echo(cfg: &RunConfig) -> Result<()> {
    eprintln!("{}", serde_json::to_string(cfg)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve()?;
            echo(&cfg)?;
            let m = commands::gen_data(&cfg)?;
            println!("train {} samples sha256 {}", m.train.count, m.train.digest);
            println!("test {} samples sha256 {}", m.test.count, m.test.digest);
        }
        Command::Verify => {
            let rows = verify::run_all();
            print!("{}", report::verify_csv(&rows));
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train {
            common,
            data_dir,
            quiet,
        } => {
            let cfg = common.resolve()?;
            echo(&cfg)?;
            let data_dir = data_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let out = commands::train(&cfg, &data_dir, !quiet)?;
            let r: Vec<f64> = out.eval.iter().map(|e| e.norm_rate).collect();
            println!(
                "{} mean normalized rate {:.6} median {:.6}",
                commands::method_name(&out.model),
                mean(&r),
                median(&r)
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.resolve()?;
            echo(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let data = data.unwrap_or_else(|| cfg.out_dir.join(TEST_FILE));
            let rows = commands::eval(&cfg, &ckpt, &data)?;
            let r: Vec<f64> = rows.iter().map(|e| e.norm_rate).collect();
            println!(
                "mean normalized rate {:.6} median {:.6}",
                mean(&r),
                median(&r)
            );
        }
        Command::Baseline { common, data } => {
            let cfg = common.resolve()?;
            echo(&cfg)?;
            let data = data.unwrap_or_else(|| cfg.out_dir.join(TEST_FILE));
            let rows = commands::baseline(&cfg, &data)?;
            for method in ["wmmse", "mrt"] {
                let r: Vec<f64> = rows
                    .iter()
                    .filter(|x| x.method == method)
                    .map(|x| x.sum_rate_nats)
                    .collect();
                println!("{method} mean sum rate {:.6} nats", mean(&r));
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
            data_dir,
            checkpoint,
            checkpoint_woa,
            quiet,
        } => {
            let cfg = common.resolve()?;
            echo(&cfg)?;
            let axis = Axis::parse(&axis)?;
            let values = if values.is_empty() {
                match axis {
                    Axis::Samples => cfg.sweep.samples.clone(),
                    Axis::Ues => cfg.sweep.ues.clone(),
                    Axis::Antennas => cfg.sweep.antennas.clone(),
                    Axis::Aps => cfg.sweep.aps.clone(),
                }
            } else {
                values
            };
            let data_dir = data_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let models = SweepModels {
                attention: checkpoint,
                no_attention: checkpoint_woa,
            };
            let rows = commands::sweep(&cfg, axis, &values, &data_dir, &models, !quiet)?;
            print!("{}", report::sweep_csv(&rows));
        }
        Command::Commutant { n, m, k } => {
            let (dim, orbits) = commands::commutant(n, m, k)?;
            println!("(N,M,K)=({n},{m},{k}) dimension {dim} orbits {orbits}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
