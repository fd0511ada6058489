//! `fpo`: runs one experiment and writes its rows as CSV or JSON.
//!
//! Exit status is 0 on success, 1 for bad arguments or configuration and 2 when the numerics
//! fail (a diverged run, a non-finite result, or any sweep row that recorded an error).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fpo::generators::{parse_generator_list, Generator};
use fpo::harness::{
    self, AlphaSweepConfig, DivergenceBehaviorConfig, EquivalenceConfig, ExperimentConfig, GeneratorCheckConfig,
    InitPolicy, OutputFormat, TaskParams, Theorem1Config, Theorem2Config, TrainParams,
};
use fpo::trainer::Algorithm;
use fpo::FpoError;

type G = Generator<f64>;

#[derive(Parser, Debug)]
#[command(name = "fpo", version, about = "f-divergence preference optimization experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Base seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; rows go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format; inferred from the `--out` extension when omitted.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Number of prompts in the synthetic task.
    #[arg(long, global = true, default_value_t = 4)]
    prompts: usize,
    /// Number of responses per prompt.
    #[arg(long, global = true, default_value_t = 8)]
    responses: usize,
    /// Regularization strength.
    #[arg(long, global = true, default_value_t = 0.5)]
    beta: f64,
    /// Smoothing of the pairwise losses.
    #[arg(long, global = true, default_value_t = 1e-3)]
    epsilon: f64,
    /// Comma-separated generators, e.g. `fkl,rkl,js,jeffreys,alpha:0.5`.
    #[arg(long, global = true, value_parser = parse_generators)]
    generators: Option<GeneratorList>,
}

/// A parsed `--generators` value.
#[derive(Debug, Clone)]
struct GeneratorList(Vec<G>);

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Gd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Init {
    Uniform,
    Ref,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Half-width of the uniform reward distribution.
    #[arg(long, default_value_t = 3.0)]
    reward_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
    algorithm: Optimizer,
    /// Starting policy.
    #[arg(long, value_enum)]
    init: Option<Init>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convexity, normalization and derivative checks of each generator on a log grid.
    GeneratorCheck {
        #[arg(long, default_value_t = 1e-4)]
        grid_lo: f64,
        #[arg(long, default_value_t = 1e4)]
        grid_hi: f64,
        #[arg(long, default_value_t = 101)]
        grid_points: usize,
    },
    /// Trains on full-support data and reports the distance to the exact optimum.
    Theorem1 {
        #[command(flatten)]
        train: TrainArgs,
        /// Record wall-clock seconds per generator (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Monte Carlo error of the K-sample loss against the exact divergence.
    Theorem2 {
        #[arg(long, default_value_t = 3.0)]
        reward_scale: f64,
        /// Comma-separated sample counts.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8, 32, 128])]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        repeats: usize,
    },
    /// Closed-form agreement of the losses with their named special cases.
    Equivalence {
        /// Number of random margin records.
        #[arg(long, default_value_t = 1000)]
        records: usize,
    },
    /// Trains the pairwise alpha loss across a sweep of alphas.
    AlphaSweep {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated alphas in (0, 1).
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        alphas: Vec<f64>,
        /// Number of sampled preference pairs.
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
    },
    /// Fits a one-mode family to a two-mode target and reports the mass in each basin.
    DivergenceBehavior {
        #[arg(long, default_value_t = 20_000)]
        max_iters: usize,
        /// Distance of each target mode from zero.
        #[arg(long, default_value_t = 2.0)]
        mode_center: f64,
        /// Width of each target mode.
        #[arg(long, default_value_t = 1.0)]
        mode_sigma: f64,
    },
}

fn parse_generators(s: &str) -> Result<GeneratorList, String> {
    parse_generator_list(s).map(GeneratorList).map_err(|e| e.to_string())
}

impl Common {
    fn task(&self, reward_scale: f64) -> TaskParams {
        TaskParams { seed: self.seed, prompts: self.prompts, responses: self.responses, beta: self.beta, reward_scale }
    }

    fn generators_or(&self, default: Vec<G>) -> Vec<G> {
        self.generators.as_ref().map_or(default, |g| g.0.clone())
    }

    fn output_format(&self) -> OutputFormat {
        match self.format {
            Some(Format::Csv) => OutputFormat::Csv,
            Some(Format::Json) => OutputFormat::Json,
            None => match self.out.as_deref().and_then(Path::extension).and_then(|e| e.to_str()) {
                Some(ext) if ext.eq_ignore_ascii_case("json") => OutputFormat::Json,
                _ => OutputFormat::Csv,
            },
        }
    }
}

impl TrainArgs {
    fn params(&self, defaults: TrainParams) -> TrainParams {
        TrainParams {
            algorithm: match self.algorithm {
                Optimizer::Adam => Algorithm::AdamLike,
                Optimizer::Gd => Algorithm::GradientDescent,
            },
            learning_rate: self.lr,
            max_steps: self.max_steps.unwrap_or(defaults.max_steps),
            init: match self.init {
                Some(Init::Uniform) => InitPolicy::Uniform,
                Some(Init::Ref) => InitPolicy::Reference,
                None => defaults.init,
            },
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, FpoError> {
    let c = &cli.common;
    Ok(match &cli.command {
        Command::GeneratorCheck { grid_lo, grid_hi, grid_points } => {
            ExperimentConfig::GeneratorCheck(GeneratorCheckConfig {
                generators: c.generators_or(G::named_catalog()),
                grid_lo: *grid_lo,
                grid_hi: *grid_hi,
                grid_points: *grid_points,
            })
        }
        Command::Theorem1 { train, timing } => ExperimentConfig::Theorem1(Theorem1Config {
            task: c.task(train.reward_scale),
            train: train.params(TrainParams::default()),
            generators: c.generators_or(G::named_catalog()),
            timing: *timing,
        }),
        Command::Theorem2 { reward_scale, ks, repeats } => {
            let defaults = Theorem2Config::default();
            ExperimentConfig::Theorem2(Theorem2Config {
                task: c.task(*reward_scale),
                generators: c.generators_or(defaults.generators),
                ks: ks.clone(),
                repeats: *repeats,
            })
        }
        Command::Equivalence { records } => ExperimentConfig::Equivalence(EquivalenceConfig {
            seed: c.seed,
            records: *records,
            epsilon: c.epsilon,
            ..EquivalenceConfig::default()
        }),
        Command::AlphaSweep { train, alphas, pairs } => {
            let defaults = AlphaSweepConfig::default();
            ExperimentConfig::AlphaSweep(AlphaSweepConfig {
                task: c.task(train.reward_scale),
                train: train.params(defaults.train),
                alphas: alphas.clone(),
                pairs: *pairs,
                epsilon: c.epsilon,
            })
        }
        Command::DivergenceBehavior { max_iters, mode_center, mode_sigma } => {
            if !(mode_sigma.is_finite() && *mode_sigma > 0.0 && mode_center.is_finite()) {
                return Err(FpoError::Config("target modes need a finite center and a positive width".into()));
            }
            let defaults = DivergenceBehaviorConfig::default();
            let target = defaults.family.mixture(&[(-mode_center, *mode_sigma), (*mode_center, *mode_sigma)]);
            ExperimentConfig::DivergenceBehavior(DivergenceBehaviorConfig {
                generators: c.generators_or(defaults.generators),
                target,
                max_iters: *max_iters,
                ..defaults
            })
        }
    })
}

fn exit_for(e: &FpoError) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let output = match build_config(&cli).and_then(|cfg| harness::run(&cfg)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_for(&e);
        }
    };
    let format = cli.common.output_format();
    let written = match &cli.common.out {
        Some(path) => File::create(path).map_err(FpoError::from).and_then(|f| {
            let mut w = BufWriter::new(f);
            output.write(format, &mut w)?;
            w.flush()?;
            Ok(())
        }),
        None => output.write(format, io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return exit_for(&e);
    }
    // The summary goes to stderr when the rows occupy stdout.
    match &cli.common.out {
        Some(path) => println!("{} -> {}", output.summary(), path.display()),
        None => eprintln!("{}", output.summary()),
    }
    let failures = output.failures();
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        ExitCode::from(2)
    }
}
