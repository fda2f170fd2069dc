use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opq::cli::{
    cmd_allocate, cmd_compress, cmd_report, cmd_synth, cmd_verify, AllocationPaths, PartialConfig, RunConfig,
    COMPRESSED_FILE, EXIT_VALIDATION,
};
use opq::synth::SynthConfig;
use opq::{OpqError, Result};

#[derive(Parser)]
#[command(name = "opq", version, about = "One-shot pruning-quantization allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit Laplace scales and solve pruning masks and quantization steps
    Allocate(RunArgs),
    /// Encode the model under an existing allocation
    Compress {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding pruning.art and quant.art (defaults to --out)
        #[arg(long)]
        alloc: Option<PathBuf>,
        /// Compressed output file (defaults to <out>/model.opq)
        #[arg(long)]
        compressed: Option<PathBuf>,
    },
    /// Decode and check a compressed model against its allocation
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        alloc: Option<PathBuf>,
        #[arg(long)]
        compressed: Option<PathBuf>,
    },
    /// Real versus analytic error sweeps
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        prune_sweep: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])]
        bit_sweep: Vec<f64>,
    },
    /// Generate a synthetic Laplace model container
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        layers: usize,
        /// Weights per layer
        #[arg(long, default_value_t = 102_400)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// One scale for all layers, or one per layer
        #[arg(long, value_delimiter = ',', default_values_t = [0.05])]
        tau: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target pruning rate in (0, 1)
    #[arg(long)]
    prune: Option<f64>,
    /// Target average bitwidth
    #[arg(long)]
    bits: Option<f64>,
    /// Tolerance on the model pruning rate
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    include: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    exclude: Option<Vec<String>>,
    #[arg(long)]
    channel_axis: Option<usize>,
    #[arg(long)]
    gap_bits: Option<u8>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(path) => PartialConfig::load(path)?,
            None => PartialConfig::default(),
        };
        let flags = PartialConfig {
            model_path: self.model,
            output_dir: self.out,
            p_target: self.prune,
            b_target: self.bits,
            rate_tol: self.tol,
            fit: None,
            include: self.include,
            exclude: self.exclude,
            channel_axis: self.channel_axis,
            gap_bits: self.gap_bits,
        };
        let config = file.merge(flags).resolve();
        config.validate()?;
        Ok(config)
    }
}

fn locate(config: &RunConfig, alloc: Option<PathBuf>, compressed: Option<PathBuf>) -> (AllocationPaths, PathBuf) {
    let alloc = alloc.unwrap_or_else(|| config.output_dir.clone());
    let compressed = compressed.unwrap_or_else(|| config.output_dir.join(COMPRESSED_FILE));
    (AllocationPaths::in_dir(&alloc), compressed)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Allocate(run) => {
            let config = run.resolve()?;
            let s = cmd_allocate(&config)?;
            println!(
                "allocated {} layers ({} weights): beta {:.6e}, p_model {:.10}, p_empirical {:.6}, B_eff {:.4} (continuous {:.4})",
                s.layers, s.weights, s.beta, s.p_model, s.p_empirical, s.b_effective_rounded, s.b_effective_continuous
            );
        }
        Command::Compress { run, alloc, compressed } => {
            let config = run.resolve()?;
            let (paths, output) = locate(&config, alloc, compressed);
            let r = cmd_compress(&config, &paths, &output)?;
            println!("wrote {} ({} bytes)", output.display(), r.compressed_bytes);
            println!("ideal rate  {:.2}x", r.ideal_rate);
            println!("actual rate {:.2}x", r.actual_rate);
        }
        Command::Verify { run, alloc, compressed } => {
            let config = run.resolve()?;
            let (paths, input) = locate(&config, alloc, compressed);
            let report = cmd_verify(&config, &paths, &input)?;
            for check in &report.checks {
                println!("ok  {check}");
            }
            println!(
                "ideal rate {:.2}x, actual rate {:.2}x",
                report.rate.ideal_rate, report.rate.actual_rate
            );
        }
        Command::Report {
            run,
            prune_sweep,
            bit_sweep,
        } => {
            let config = run.resolve()?;
            let (prune, bits) = cmd_report(&config, &prune_sweep, &bit_sweep)?;
            for report in [&prune, &bits] {
                for row in &report.rows {
                    println!(
                        "{:<10} {:>6} real {:.4e} analytic {:.4e} gap {:.4}",
                        report.sweep_variable.as_str(),
                        row.setting,
                        row.real_error,
                        row.analytic_error,
                        row.relative_gap
                    );
                }
            }
        }
        Command::Synth {
            out,
            layers,
            count,
            channels,
            tau,
            seed,
        } => {
            let taus = match tau.len() {
                1 => vec![tau[0]; layers],
                n if n == layers => tau,
                n => {
                    return Err(OpqError::InvalidArgument(format!(
                        "{n} scales given for {layers} layers"
                    )))
                }
            };
            let config = SynthConfig::uniform(&taus, count, channels, seed)?;
            let model = cmd_synth(&config, &out)?;
            println!(
                "wrote {} layers ({} weights) to {}",
                model.len(),
                model.total_count(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
