//! End-to-end experiments behind the `fpo` command line.
//!
//! Each experiment is a pure function of its config (seeds included) and returns typed rows.
//! Rows serialize to CSV with a fixed header (field order) or to a JSON array. Independent
//! sweep points run on a rayon pool capped by `FPO_THREADS`; results are collected in sweep
//! order, so output never depends on scheduling.

use std::io::Write;
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution as _};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_synthetic_task, sample_preferences, sample_reward_dataset, SyntheticTask};
use crate::error::{FpoError, Result};
use crate::generators::{check_generator, log_grid, AffineShifted, Generator};
use crate::losses::{
    dpo_loss, exo_loss, fpo_loss_pairwise_smoothed, ksample_record_loss, pairwise_record_loss, Dataset, LossConfig,
    PairwiseBatch,
};
use crate::policy::{
    exact_f_divergence, geometric_mixture, hatted_optimal_policy, mean_tv_optimal, RewardTable, TabularPolicy,
};
use crate::scalar::{log_softmax, sigmoid, softplus};
use crate::trainer::{train, Algorithm, OptimizerConfig, TrainReport};

type G = Generator<f64>;

/// Environment variable capping the worker threads used for sweeps.
pub const THREADS_ENV: &str = "FPO_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    GeneratorCheck,
    Theorem1,
    Theorem2,
    Equivalence,
    AlphaSweep,
    DivergenceBehavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Starting logits for training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// All-zero logits.
    #[default]
    Uniform,
    Reference,
}

/// Synthetic task dimensions and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub seed: u64,
    pub prompts: usize,
    pub responses: usize,
    /// Regularization strength of the loss and of the evaluation optimum.
    pub beta: f64,
    pub reward_scale: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams { seed: 0, prompts: 4, responses: 8, beta: 0.5, reward_scale: crate::datagen::DEFAULT_REWARD_SCALE }
    }
}

impl TaskParams {
    pub fn build(&self) -> Result<SyntheticTask<f64>> {
        make_synthetic_task(self.seed, self.prompts, self.responses, self.beta, self.reward_scale)
    }
}

/// Training knobs shared by the experiments that train.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub init: InitPolicy,
}

impl TrainParams {
    fn optimizer(&self, seed: u64) -> OptimizerConfig<f64> {
        let mut opt = match self.algorithm {
            Algorithm::GradientDescent => OptimizerConfig::gradient_descent(self.learning_rate, self.max_steps),
            Algorithm::AdamLike => OptimizerConfig::adam(self.learning_rate, self.max_steps),
        };
        opt.seed = seed;
        opt.log_interval = self.max_steps.max(1);
        opt
    }

    fn init_policy(&self, task: &SyntheticTask<f64>) -> Result<TabularPolicy<f64>> {
        match self.init {
            InitPolicy::Uniform => {
                let (p, r) = task.shape();
                task.reference.with_logits(vec![0.0; p * r])
            }
            InitPolicy::Reference => Ok(task.reference.clone()),
        }
    }
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { algorithm: Algorithm::AdamLike, learning_rate: 0.05, max_steps: 5000, init: InitPolicy::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCheckConfig {
    pub generators: Vec<G>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
}

impl Default for GeneratorCheckConfig {
    fn default() -> Self {
        GeneratorCheckConfig { generators: G::named_catalog(), grid_lo: 1e-4, grid_hi: 1e4, grid_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Theorem1Config {
    pub task: TaskParams,
    pub train: TrainParams,
    pub generators: Vec<G>,
    /// Fill the `seconds` column; off by default so output files are reproducible.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Config {
    pub task: TaskParams,
    pub generators: Vec<G>,
    pub ks: Vec<usize>,
    /// Monte Carlo repetitions per K.
    pub repeats: usize,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            task: TaskParams::default(),
            generators: vec![G::ForwardKl, G::ReverseKl, G::Alpha(0.5)],
            ks: vec![2, 8, 32, 128],
            repeats: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceConfig {
    pub seed: u64,
    pub records: usize,
    /// Smoothing of the EXO comparison.
    pub epsilon: f64,
    /// Smoothing of the α-endpoint comparisons.
    pub interpolation_epsilon: f64,
    /// Margins are drawn uniformly from `[−margin_range, margin_range]`.
    pub margin_range: f64,
    /// Narrower margin range for the α-endpoint comparisons.
    pub interpolation_range: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            seed: 0,
            records: 1000,
            epsilon: 1e-3,
            interpolation_epsilon: 0.1,
            margin_range: 10.0,
            interpolation_range: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSweepConfig {
    pub task: TaskParams,
    pub train: TrainParams,
    pub alphas: Vec<f64>,
    pub pairs: usize,
    pub epsilon: f64,
}

impl Default for AlphaSweepConfig {
    fn default() -> Self {
        AlphaSweepConfig {
            task: TaskParams::default(),
            train: TrainParams { max_steps: 2000, init: InitPolicy::Reference, ..TrainParams::default() },
            alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            pairs: 2000,
            epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceBehaviorConfig {
    pub generators: Vec<G>,
    pub family: GridDensityFamily,
    pub target: Vec<f64>,
    /// Initial means; each start uses unit width.
    pub starts: Vec<f64>,
    pub max_iters: usize,
}

impl Default for DivergenceBehaviorConfig {
    fn default() -> Self {
        let family = GridDensityFamily::reference();
        let target = family.mixture(&[(-2.0, 1.0), (2.0, 1.0)]);
        DivergenceBehaviorConfig {
            generators: G::named_catalog(),
            family,
            target,
            starts: vec![-2.0, 0.0, 2.0],
            max_iters: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentConfig {
    GeneratorCheck(GeneratorCheckConfig),
    Theorem1(Theorem1Config),
    Theorem2(Theorem2Config),
    Equivalence(EquivalenceConfig),
    AlphaSweep(AlphaSweepConfig),
    DivergenceBehavior(DivergenceBehaviorConfig),
}

impl ExperimentConfig {
    pub fn experiment(&self) -> Experiment {
        match self {
            ExperimentConfig::GeneratorCheck(_) => Experiment::GeneratorCheck,
            ExperimentConfig::Theorem1(_) => Experiment::Theorem1,
            ExperimentConfig::Theorem2(_) => Experiment::Theorem2,
            ExperimentConfig::Equivalence(_) => Experiment::Equivalence,
            ExperimentConfig::AlphaSweep(_) => Experiment::AlphaSweep,
            ExperimentConfig::DivergenceBehavior(_) => Experiment::DivergenceBehavior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorCheckRow {
    pub generator: String,
    pub f_at_one: f64,
    pub convexity_violation: f64,
    pub derivative_rel_error: f64,
}

/// One generator's Theorem 1 run. The tv columns are empty when training failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Row {
    pub generator: String,
    pub final_tv_hat: Option<f64>,
    pub final_tv: Option<f64>,
    pub steps: usize,
    pub seconds: Option<f64>,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Row {
    pub generator: String,
    pub k: usize,
    pub median_abs_err: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub check: String,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub final_loss: Option<f64>,
    pub final_tv_hat: Option<f64>,
    pub win_proxy: Option<f64>,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceBehaviorRow {
    pub generator: String,
    pub mass_basin_1: f64,
    pub mass_basin_2: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutput {
    GeneratorCheck(Vec<GeneratorCheckRow>),
    Theorem1(Vec<Theorem1Row>),
    Theorem2(Vec<Theorem2Row>),
    Equivalence(Vec<EquivalenceRow>),
    AlphaSweep(Vec<AlphaSweepRow>),
    DivergenceBehavior(Vec<DivergenceBehaviorRow>),
}

impl ExperimentOutput {
    pub fn len(&self) -> usize {
        match self {
            ExperimentOutput::GeneratorCheck(r) => r.len(),
            ExperimentOutput::Theorem1(r) => r.len(),
            ExperimentOutput::Theorem2(r) => r.len(),
            ExperimentOutput::Equivalence(r) => r.len(),
            ExperimentOutput::AlphaSweep(r) => r.len(),
            ExperimentOutput::DivergenceBehavior(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Error messages of rows whose run failed.
    pub fn failures(&self) -> Vec<String> {
        match self {
            ExperimentOutput::Theorem1(rows) => {
                rows.iter().filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.generator))).collect()
            }
            ExperimentOutput::AlphaSweep(rows) => {
                rows.iter().filter_map(|r| r.error.as_ref().map(|e| format!("alpha {}: {e}", r.alpha))).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn write<W: Write>(&self, format: OutputFormat, out: W) -> Result<()> {
        match self {
            ExperimentOutput::GeneratorCheck(r) => write_rows(r, format, out),
            ExperimentOutput::Theorem1(r) => write_rows(r, format, out),
            ExperimentOutput::Theorem2(r) => write_rows(r, format, out),
            ExperimentOutput::Equivalence(r) => write_rows(r, format, out),
            ExperimentOutput::AlphaSweep(r) => write_rows(r, format, out),
            ExperimentOutput::DivergenceBehavior(r) => write_rows(r, format, out),
        }
    }

    /// One line describing the result.
    pub fn summary(&self) -> String {
        fn worst<I: Iterator<Item = f64>>(it: I) -> f64 {
            it.fold(0.0, f64::max)
        }
        match self {
            ExperimentOutput::GeneratorCheck(r) => format!(
                "generator-check: {} generators, worst derivative error {:.3e}, worst convexity violation {:.3e}",
                r.len(),
                worst(r.iter().map(|x| x.derivative_rel_error)),
                worst(r.iter().map(|x| x.convexity_violation))
            ),
            ExperimentOutput::Theorem1(r) => format!(
                "theorem1: {} generators, worst final_tv_hat {:.3e}, {} failed",
                r.len(),
                worst(r.iter().filter_map(|x| x.final_tv_hat)),
                self.failures().len()
            ),
            ExperimentOutput::Theorem2(r) => format!(
                "theorem2: {} rows, largest median error {:.3e}",
                r.len(),
                worst(r.iter().map(|x| x.median_abs_err))
            ),
            ExperimentOutput::Equivalence(r) => format!(
                "equivalence: {}",
                r.iter().map(|x| format!("{}={:.2e}", x.check, x.max_gap)).collect::<Vec<_>>().join(" ")
            ),
            ExperimentOutput::AlphaSweep(r) => {
                format!("alpha-sweep: {} alphas, {} failed", r.len(), self.failures().len())
            }
            ExperimentOutput::DivergenceBehavior(r) => format!(
                "divergence-behavior: {}",
                r.iter()
                    .map(|x| format!("{}=({:.3},{:.3})", x.generator, x.mass_basin_1, x.mass_basin_2))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        }
    }
}

/// CSV with a header row, or a pretty JSON array.
pub fn write_rows<R: Serialize, W: Write>(rows: &[R], format: OutputFormat, mut out: W) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            out.write_all(crate::json::to_string_pretty(rows)?.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    Ok(match cfg {
        ExperimentConfig::GeneratorCheck(c) => ExperimentOutput::GeneratorCheck(run_generator_check(c)?),
        ExperimentConfig::Theorem1(c) => ExperimentOutput::Theorem1(run_theorem1(c)?),
        ExperimentConfig::Theorem2(c) => ExperimentOutput::Theorem2(run_theorem2(c)?),
        ExperimentConfig::Equivalence(c) => ExperimentOutput::Equivalence(run_equivalence(c)?),
        ExperimentConfig::AlphaSweep(c) => ExperimentOutput::AlphaSweep(run_alpha_sweep(c)?),
        ExperimentConfig::DivergenceBehavior(c) => ExperimentOutput::DivergenceBehavior(run_divergence_behavior(c)?),
    })
}

// Maps `f` over `items` on a pool sized by FPO_THREADS, preserving order.
fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Result<Vec<O>> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| FpoError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FpoError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

/// SplitMix64 of `base` folded with each part: independent per-sweep-point seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(FpoError::Config(format!("{what} list is empty")));
    }
    Ok(())
}

pub fn run_generator_check(cfg: &GeneratorCheckConfig) -> Result<Vec<GeneratorCheckRow>> {
    nonempty(&cfg.generators, "generator")?;
    if !(cfg.grid_lo > 0.0 && cfg.grid_lo < 1.0 && cfg.grid_hi > 1.0 && cfg.grid_points >= 3) {
        return Err(FpoError::Config("grid must span 1 with at least 3 points".into()));
    }
    let grid: Vec<f64> = log_grid(cfg.grid_lo, cfg.grid_hi, cfg.grid_points);
    let grid = if grid.contains(&1.0) {
        grid
    } else {
        let mut g = grid;
        g.push(1.0);
        g.sort_by(f64::total_cmp);
        g
    };
    cfg.generators
        .iter()
        .map(|g| {
            let r = check_generator(g, &grid)?;
            Ok(GeneratorCheckRow {
                generator: g.name(),
                f_at_one: r.f_at_one,
                convexity_violation: r.convexity_violation,
                derivative_rel_error: r.derivative_rel_error,
            })
        })
        .collect()
}

/// Full-support reward-labeled data: one record per prompt listing every response.
pub fn full_support_data(task: &SyntheticTask<f64>) -> Result<Dataset<f64>> {
    let (p, r) = task.shape();
    Ok(Dataset::KSample(sample_reward_dataset(task, p, r, 0, true)?))
}

pub fn run_theorem1(cfg: &Theorem1Config) -> Result<Vec<Theorem1Row>> {
    nonempty(&cfg.generators, "generator")?;
    let task = cfg.task.build()?;
    let data = full_support_data(&task)?;
    let init = cfg.train.init_policy(&task)?;
    let beta = cfg.task.beta;
    par_map(&cfg.generators, |g| {
        let start = Instant::now();
        let loss = LossConfig::general(g.clone(), beta);
        let outcome =
            train(&cfg.train.optimizer(cfg.task.seed), &loss, &init, &task.reference, Some(&task.reward), &data)
                .and_then(|rep| {
                    let tv = mean_tv_optimal(&rep.final_policy, &task.reference, &task.reward, beta)?;
                    Ok((rep, tv))
                });
        let seconds = cfg.timing.then(|| start.elapsed().as_secs_f64());
        match outcome {
            Ok((rep, tv)) => Theorem1Row {
                generator: g.name(),
                final_tv_hat: rep.final_tv(),
                final_tv: Some(tv),
                steps: rep.steps_taken,
                seconds,
                error: None,
            },
            Err(e) => Theorem1Row {
                generator: g.name(),
                final_tv_hat: None,
                final_tv: None,
                steps: match e {
                    FpoError::Divergence { step, .. } => step,
                    _ => 0,
                },
                seconds,
                error: Some(e.to_string()),
            },
        }
    })
}

/// `mean_x D_f(π̂_θ ‖ π̂*)`, the quantity the K-sample loss estimates.
pub fn exact_hatted_divergence(
    gen: &G,
    policy: &TabularPolicy<f64>,
    reference: &TabularPolicy<f64>,
    reward: &RewardTable<f64>,
    beta: f64,
) -> Result<f64> {
    let np = policy.num_prompts();
    let mut acc = 0.0;
    for x in 0..np {
        let p = geometric_mixture(policy, reference, beta, x)?;
        let q = hatted_optimal_policy(reference, reward, x)?;
        acc += exact_f_divergence(gen, &p, &q)?;
    }
    Ok(acc / np as f64)
}

/// Prompt-averaged K-sample loss with K responses per prompt drawn i.i.d. from `π_ref`.
pub fn monte_carlo_estimate(
    gen: &G,
    policy: &TabularPolicy<f64>,
    reference: &TabularPolicy<f64>,
    reward: &RewardTable<f64>,
    beta: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let np = policy.num_prompts();
    let mut acc = 0.0;
    for x in 0..np {
        let sampler = WeightedIndex::new(reference.distribution(x)?.probs())
            .map_err(|e| FpoError::Config(format!("cannot sample the reference: {e}")))?;
        let lp = log_softmax(policy.logits_row(x)?);
        let lr = log_softmax(reference.logits_row(x)?);
        let row = reward.row(x)?;
        let ys: Vec<usize> = (0..k).map(|_| sampler.sample(rng)).collect();
        let g: Vec<f64> = ys.iter().map(|&y| beta * (lp[y] - lr[y])).collect();
        let r: Vec<f64> = ys.iter().map(|&y| row[y]).collect();
        acc += ksample_record_loss(gen, &g, &r)?.0;
    }
    Ok(acc / np as f64)
}

/// The policy held fixed while the estimator is sampled: standard normal logits.
pub fn theorem2_policy(task: &SyntheticTask<f64>, seed: u64) -> Result<TabularPolicy<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7E7A]));
    let n = task.reference.logits().len();
    task.reference.with_logits((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn run_theorem2(cfg: &Theorem2Config) -> Result<Vec<Theorem2Row>> {
    nonempty(&cfg.generators, "generator")?;
    nonempty(&cfg.ks, "K")?;
    if let Some(k) = cfg.ks.iter().find(|&&k| k < 2) {
        return Err(FpoError::Config(format!("K must be at least 2, got {k}")));
    }
    if cfg.repeats == 0 {
        return Err(FpoError::Config("need at least one repeat".into()));
    }
    let task = cfg.task.build()?;
    let policy = theorem2_policy(&task, cfg.task.seed)?;
    let beta = cfg.task.beta;
    let points: Vec<(&G, usize)> = cfg.generators.iter().flat_map(|g| cfg.ks.iter().map(move |&k| (g, k))).collect();
    let rows = par_map(&points, |&(g, k)| -> Result<Theorem2Row> {
        let exact = exact_hatted_divergence(g, &policy, &task.reference, &task.reward, beta)?;
        let mut errs = (0..cfg.repeats)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.task.seed, &[k as u64, s as u64]));
                Ok((monte_carlo_estimate(g, &policy, &task.reference, &task.reward, beta, k, &mut rng)? - exact).abs())
            })
            .collect::<Result<Vec<f64>>>()?;
        errs.sort_by(f64::total_cmp);
        Ok(Theorem2Row {
            generator: g.name(),
            k,
            median_abs_err: quantile(&errs, 0.5),
            iqr: quantile(&errs, 0.75) - quantile(&errs, 0.25),
        })
    })?;
    rows.into_iter().collect()
}

// Two-response policy whose margin against a uniform reference is exactly `delta`.
fn margin_instance(delta: f64) -> Result<(TabularPolicy<f64>, TabularPolicy<f64>, PairwiseBatch<f64>)> {
    let policy = TabularPolicy::new(vec![vec![delta, 0.0]], vec![vec![1, 1]])?;
    let reference = TabularPolicy::uniform(1, 2)?;
    Ok((policy, reference, PairwiseBatch::from_triples(&[(0, 0, 1)])?))
}

pub fn run_equivalence(cfg: &EquivalenceConfig) -> Result<Vec<EquivalenceRow>> {
    if cfg.records == 0 {
        return Err(FpoError::Config("need at least one record".into()));
    }
    let draw = |range: f64, stream: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream]));
        (0..cfg.records).map(|_| rng.random_range(-range..=range)).collect()
    };
    let wide = draw(cfg.margin_range, 1);
    let narrow = draw(cfg.interpolation_range, 2);

    let mut dpo_gap = 0.0f64;
    let mut exo_gap = 0.0f64;
    for &d in &wide {
        let (p, r, b) = margin_instance(d)?;
        let limit = fpo_loss_pairwise_smoothed(&LossConfig::pairwise_smoothed(G::ReverseKl, 1.0, 0.0), &p, &r, &b)?;
        dpo_gap = dpo_gap.max((limit.loss - dpo_loss(&p, &r, 1.0, &b)?.loss).abs());
        let fkl =
            fpo_loss_pairwise_smoothed(&LossConfig::pairwise_smoothed(G::ForwardKl, 1.0, cfg.epsilon), &p, &r, &b)?;
        exo_gap = exo_gap.max((fkl.loss - exo_loss(&p, &r, 1.0, cfg.epsilon, &b)?.loss).abs());
    }

    let eps = cfg.interpolation_epsilon;
    let (ln_a, ln_b) = ((-eps).ln_1p(), eps.ln());
    let record = |g: &G, d: f64| pairwise_record_loss(g, ln_a, ln_b, d).map(|v| v.0);
    let gap = |a: &G, b: &G, ds: &[f64]| -> Result<f64> {
        ds.iter().try_fold(0.0f64, |m, &d| Ok(m.max((record(a, d)? - record(b, d)?).abs())))
    };
    let near0 = G::alpha(1e-4)?;
    let near1 = G::alpha(1.0 - 1e-4)?;
    let mid = G::alpha(0.5)?;

    let mut affine = 0.0f64;
    for base in G::named_catalog() {
        let shifted = G::custom(AffineShifted { base: base.clone(), slope: 3.0 });
        affine = affine.max(gap(&base, &shifted, &narrow)?);
    }

    let row = |check: &str, max_gap: f64| EquivalenceRow { check: check.into(), max_gap };
    Ok(vec![
        row("dpo_vs_rkl_limit", dpo_gap),
        row("exo_vs_fkl", exo_gap),
        row("alpha_low_vs_fkl", gap(&near0, &G::ForwardKl, &narrow)?),
        row("alpha_high_vs_rkl", gap(&near1, &G::ReverseKl, &narrow)?),
        row("alpha_low_vs_fkl_wide", gap(&near0, &G::ForwardKl, &wide)?),
        row("alpha_high_vs_rkl_wide", gap(&near1, &G::ReverseKl, &wide)?),
        row("alpha_mid_vs_fkl", gap(&mid, &G::ForwardKl, &narrow)?),
        row("alpha_mid_vs_rkl", gap(&mid, &G::ReverseKl, &narrow)?),
        row("affine_shift", affine),
    ])
}

/// Probability that a draw from `π_θ` beats a draw from `π_ref` under Bradley–Terry with the
/// true reward, averaged over prompts.
pub fn win_proxy(
    policy: &TabularPolicy<f64>,
    reference: &TabularPolicy<f64>,
    reward: &RewardTable<f64>,
) -> Result<f64> {
    policy.check_same_shape(reference)?;
    let np = policy.num_prompts();
    let mut acc = 0.0;
    for x in 0..np {
        let p = policy.distribution(x)?;
        let q = reference.distribution(x)?;
        let r = reward.row(x)?;
        for (i, &pi) in p.probs().iter().enumerate() {
            for (j, &qj) in q.probs().iter().enumerate() {
                acc += pi * qj * sigmoid(r[i] - r[j]);
            }
        }
    }
    Ok(acc / np as f64)
}

/// Trains one α on the sweep's preference data.
pub fn alpha_sweep_run(cfg: &AlphaSweepConfig, gen: &G) -> Result<TrainReport<f64>> {
    let task = cfg.task.build()?;
    let data = Dataset::Pairwise(sample_preferences(&task, cfg.pairs, derive_seed(cfg.task.seed, &[0xA1]))?);
    let loss = LossConfig::pairwise_smoothed(gen.clone(), cfg.task.beta, cfg.epsilon);
    let init = cfg.train.init_policy(&task)?;
    train(&cfg.train.optimizer(cfg.task.seed), &loss, &init, &task.reference, Some(&task.reward), &data)
}

pub fn run_alpha_sweep(cfg: &AlphaSweepConfig) -> Result<Vec<AlphaSweepRow>> {
    nonempty(&cfg.alphas, "alpha")?;
    if let Some(a) = cfg.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(FpoError::Config(format!("alphas must lie in (0, 1), got {a}")));
    }
    if cfg.pairs == 0 {
        return Err(FpoError::Config("need at least one preference pair".into()));
    }
    let task = cfg.task.build()?;
    let gens: Vec<G> = cfg.alphas.iter().map(|&a| G::alpha(a)).collect::<Result<_>>()?;
    let runs = par_map(&gens, |g| alpha_sweep_run(cfg, g))?;
    Ok(cfg
        .alphas
        .iter()
        .zip(runs)
        .map(|(&alpha, run)| {
            match run.and_then(|rep| Ok((win_proxy(&rep.final_policy, &task.reference, &task.reward)?, rep))) {
                Ok((win, rep)) => AlphaSweepRow {
                    alpha,
                    final_loss: Some(rep.final_loss()),
                    final_tv_hat: rep.final_tv(),
                    win_proxy: Some(win),
                    error: None,
                },
                Err(e) => AlphaSweepRow {
                    alpha,
                    final_loss: None,
                    final_tv_hat: None,
                    win_proxy: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Discretized Gaussians `∝ exp(−(x − μ)²/(2σ²))` on a fixed grid, parameterized by `(μ, ln σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensityFamily {
    grid: Vec<f64>,
}

impl GridDensityFamily {
    pub fn new(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 3 || grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FpoError::Config("grid must be finite, strictly increasing, with at least 3 points".into()));
        }
        Ok(GridDensityFamily { grid })
    }

    /// 101 evenly spaced points on `[−6, 6]`.
    pub fn reference() -> Self {
        GridDensityFamily { grid: (0..=100).map(|i| -6.0 + 0.12 * i as f64).collect() }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn log_probs(&self, mu: f64, log_sigma: f64) -> Vec<f64> {
        let s2 = (2.0 * log_sigma).exp();
        let z: Vec<f64> = self.grid.iter().map(|x| -(x - mu) * (x - mu) / (2.0 * s2)).collect();
        log_softmax(&z)
    }

    pub fn probs(&self, mu: f64, log_sigma: f64) -> Vec<f64> {
        self.log_probs(mu, log_sigma).into_iter().map(f64::exp).collect()
    }

    /// Equal-weight mixture of the discretized `(μ, σ)` components.
    pub fn mixture(&self, components: &[(f64, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for &(mu, sigma) in components {
            for (o, p) in out.iter_mut().zip(self.probs(mu, sigma.ln())) {
                *o += p / components.len() as f64;
            }
        }
        out
    }

    /// Index of the lowest interior local minimum of `target`, if it has one.
    pub fn basin_split(target: &[f64]) -> Option<usize> {
        (1..target.len().saturating_sub(1))
            .filter(|&i| target[i] <= target[i - 1] && target[i] <= target[i + 1])
            .filter(|&i| target[..i].iter().any(|&t| t > target[i]) && target[i + 1..].iter().any(|&t| t > target[i]))
            .min_by(|&a, &b| target[a].total_cmp(&target[b]))
    }

    /// Mass left and right of `split`; the split cell counts half to each side.
    pub fn basin_masses(p: &[f64], split: usize) -> (f64, f64) {
        let left: f64 = p[..split].iter().sum::<f64>() + p[split] / 2.0;
        let right: f64 = p[split + 1..].iter().sum::<f64>() + p[split] / 2.0;
        (left, right)
    }
}

// Below this log-ratio the derivative is evaluated at the floor: p·f′(p/q) = q·u·f′(u) is then
// its u → 0 limit to double precision for every shipped generator.
const LN_RATIO_FLOOR: f64 = -300.0;

/// `D_f(p_θ ‖ target)` and its gradient in `(μ, ln σ)`.
pub fn family_divergence(
    gen: &G,
    family: &GridDensityFamily,
    target: &[f64],
    mu: f64,
    log_sigma: f64,
) -> Result<(f64, [f64; 2])> {
    if target.len() != family.grid.len() {
        return Err(FpoError::Support("target and grid differ in size".into()));
    }
    let lp = family.log_probs(mu, log_sigma);
    let mut loss = 0.0;
    // p_i·f′_i
    let mut pf = Vec::with_capacity(lp.len());
    for (&l, &q) in lp.iter().zip(target) {
        let ln_u = l - q.ln();
        loss += q * gen.eval_ln(ln_u)?;
        let c = ln_u.max(LN_RATIO_FLOOR);
        pf.push(q * c.exp() * gen.derivative_ln(c)?);
    }
    let mean: f64 = pf.iter().sum();
    let s2 = (2.0 * log_sigma).exp();
    let mut grad = [0.0; 2];
    for ((&x, &l), &t) in family.grid.iter().zip(&lp).zip(&pf) {
        let dz = t - l.exp() * mean;
        let d = x - mu;
        grad[0] += dz * d / s2;
        grad[1] += dz * d * d / s2;
    }
    Ok((loss, grad))
}

/// Result of one start of the family fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyFit {
    pub mu: f64,
    pub log_sigma: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Gradient descent with backtracking (Armijo) line search from `(mu, log_sigma)`.
pub fn fit_family(
    gen: &G,
    family: &GridDensityFamily,
    target: &[f64],
    mu: f64,
    log_sigma: f64,
    max_iters: usize,
) -> Result<FamilyFit> {
    const TOL: f64 = 1e-7;
    let mut theta = [mu, log_sigma];
    let (mut loss, mut grad) = family_divergence(gen, family, target, theta[0], theta[1])?;
    let mut step = 1.0;
    for _ in 0..max_iters {
        let gnorm = grad[0].abs().max(grad[1].abs());
        if gnorm < TOL {
            break;
        }
        let g2 = grad[0] * grad[0] + grad[1] * grad[1];
        let mut accepted = false;
        while step > 1e-16 {
            let cand = [theta[0] - step * grad[0], theta[1] - step * grad[1]];
            if let Ok((l, g)) = family_divergence(gen, family, target, cand[0], cand[1]) {
                if l.is_finite() && l <= loss - 1e-4 * step * g2 {
                    theta = cand;
                    loss = l;
                    grad = g;
                    accepted = true;
                    break;
                }
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(1e3);
    }
    let grad_norm = grad[0].abs().max(grad[1].abs());
    Ok(FamilyFit {
        mu: theta[0],
        log_sigma: theta[1],
        loss,
        grad_norm,
        converged: grad_norm < 1e-5 && loss.is_finite(),
    })
}

/// Best converged fit over the configured starts.
pub fn best_family_fit(cfg: &DivergenceBehaviorConfig, gen: &G) -> Result<FamilyFit> {
    let mut best: Option<FamilyFit> = None;
    for &mu in &cfg.starts {
        let Ok(fit) = fit_family(gen, &cfg.family, &cfg.target, mu, 0.0, cfg.max_iters) else { continue };
        if fit.converged && best.is_none_or(|b| fit.loss < b.loss) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| FpoError::Optimization(format!("no start converged for generator {gen}")))
}

pub fn run_divergence_behavior(cfg: &DivergenceBehaviorConfig) -> Result<Vec<DivergenceBehaviorRow>> {
    nonempty(&cfg.generators, "generator")?;
    nonempty(&cfg.starts, "start")?;
    if cfg.target.len() != cfg.family.grid.len() || cfg.target.iter().any(|q| q.is_nan() || *q <= 0.0) {
        return Err(FpoError::Config("target must be positive on every grid point".into()));
    }
    let split = GridDensityFamily::basin_split(&cfg.target);
    let fits = par_map(&cfg.generators, |g| best_family_fit(cfg, g))?;
    cfg.generators
        .iter()
        .zip(fits)
        .map(|(g, fit)| {
            let fit = fit?;
            let p = cfg.family.probs(fit.mu, fit.log_sigma);
            let (m1, m2) = match split {
                Some(s) => GridDensityFamily::basin_masses(&p, s),
                None => (p.iter().sum(), 0.0),
            };
            Ok(DivergenceBehaviorRow {
                generator: g.name(),
                mass_basin_1: m1,
                mass_basin_2: m2,
                mu: fit.mu,
                sigma: fit.log_sigma.exp(),
            })
        })
        .collect()
}

/// `−ln σ(Δ)` written as a softplus, independent of the loss code.
pub fn dpo_reference(delta: f64) -> f64 {
    softplus(-delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_train() -> TrainParams {
        TrainParams { max_steps: 400, ..TrainParams::default() }
    }

    #[test]
    fn seeds_are_spread_and_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(0, &[]), derive_seed(1, &[]));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
    }

    #[test]
    fn generator_check_rows() {
        let rows = run_generator_check(&GeneratorCheckConfig::default()).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.f_at_one < 1e-12 && r.derivative_rel_error < 1e-5));
    }

    #[test]
    fn theorem1_zero_steps_reports_initial_tv() {
        let cfg = Theorem1Config {
            task: TaskParams { reward_scale: 0.0, ..TaskParams::default() },
            train: TrainParams { max_steps: 0, init: InitPolicy::Reference, ..TrainParams::default() },
            generators: G::named_catalog(),
            timing: false,
        };
        let rows = run_theorem1(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            assert_eq!(r.steps, 0);
            assert!(r.final_tv_hat.unwrap() < 1e-6);
            assert!(r.final_tv.unwrap() < 1e-6);
            assert_eq!(r.seconds, None);
        }
    }

    #[test]
    fn theorem1_failures_stay_in_their_row() {
        let cfg = Theorem1Config {
            train: TrainParams {
                algorithm: Algorithm::GradientDescent,
                learning_rate: 1e300,
                max_steps: 5,
                ..TrainParams::default()
            },
            generators: vec![G::ForwardKl, G::ReverseKl],
            ..Theorem1Config::default()
        };
        let out = ExperimentOutput::Theorem1(run_theorem1(&cfg).unwrap());
        assert_eq!(out.len(), 2);
        let mut csv = Vec::new();
        out.write(OutputFormat::Csv, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("generator,final_tv_hat,final_tv,steps,seconds\n"));
    }

    #[test]
    fn estimator_is_exact_when_policy_tracks_reward() {
        let task = TaskParams::default().build().unwrap();
        let beta = 0.5;
        // β(θ − ρ) = r + const
        let logits: Vec<f64> =
            task.reference.logits().iter().zip(task.reward.values()).map(|(rho, r)| rho + r / beta + 1.3).collect();
        let policy = task.reference.with_logits(logits).unwrap();
        assert!(
            exact_hatted_divergence(&G::ForwardKl, &policy, &task.reference, &task.reward, beta).unwrap().abs() < 1e-12
        );
        for k in [2, 8, 32] {
            for s in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                for g in G::named_catalog() {
                    let est =
                        monte_carlo_estimate(&g, &policy, &task.reference, &task.reward, beta, k, &mut rng).unwrap();
                    assert!(est.abs() < 1e-12, "{g} K={k}");
                }
            }
        }
    }

    #[test]
    fn theorem2_rejects_bad_ks() {
        let cfg = Theorem2Config { ks: vec![], ..Theorem2Config::default() };
        assert!(matches!(run_theorem2(&cfg), Err(FpoError::Config(_))));
        let cfg = Theorem2Config { ks: vec![1, 4], ..Theorem2Config::default() };
        assert!(matches!(run_theorem2(&cfg), Err(FpoError::Config(_))));
    }

    #[test]
    fn equivalence_rows() {
        let rows = run_equivalence(&EquivalenceConfig::default()).unwrap();
        let gap = |name: &str| rows.iter().find(|r| r.check == name).unwrap().max_gap;
        assert!(gap("dpo_vs_rkl_limit") < 1e-10);
        assert!(gap("exo_vs_fkl") < 1e-12);
        assert!(gap("alpha_low_vs_fkl") < 1e-3);
        assert!(gap("alpha_high_vs_rkl") < 1e-3);
        assert!(gap("alpha_mid_vs_fkl") > 1e-2);
        assert!(gap("alpha_mid_vs_rkl") > 1e-2);
        assert!(gap("affine_shift") < 1e-12);
        for d in [-3.0, 0.0, 4.5] {
            let (p, r, b) = margin_instance(d).unwrap();
            assert!((dpo_loss(&p, &r, 1.0, &b).unwrap().loss - dpo_reference(d)).abs() < 1e-15);
        }
    }

    #[test]
    fn win_proxy_of_reference_is_one_half() {
        let task = TaskParams::default().build().unwrap();
        let w = win_proxy(&task.reference, &task.reference, &task.reward).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        let cfg = AlphaSweepConfig {
            alphas: vec![0.5],
            train: TrainParams { max_steps: 0, init: InitPolicy::Reference, ..TrainParams::default() },
            ..AlphaSweepConfig::default()
        };
        let rows = run_alpha_sweep(&cfg).unwrap();
        assert!((rows[0].win_proxy.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alpha_sweep_improves_win_rate() {
        let cfg = AlphaSweepConfig { alphas: vec![0.1, 0.9], train: quick_train(), ..AlphaSweepConfig::default() };
        let rows = run_alpha_sweep(&cfg).unwrap();
        for r in &rows {
            assert!(r.win_proxy.unwrap() > 0.5, "{r:?}");
        }
        assert!(run_alpha_sweep(&AlphaSweepConfig { alphas: vec![1.0], ..cfg }).is_err());
    }

    #[test]
    fn family_gradient_matches_central_differences() {
        let cfg = DivergenceBehaviorConfig::default();
        for g in G::named_catalog() {
            for &(mu, ls) in &[(0.3, 0.1), (-1.7, -0.4), (2.5, 0.7)] {
                let (_, grad) = family_divergence(&g, &cfg.family, &cfg.target, mu, ls).unwrap();
                let h = 1e-6;
                let f = |m: f64, s: f64| family_divergence(&g, &cfg.family, &cfg.target, m, s).unwrap().0;
                let dm = (f(mu + h, ls) - f(mu - h, ls)) / (2.0 * h);
                let ds = (f(mu, ls + h) - f(mu, ls - h)) / (2.0 * h);
                assert!((grad[0] - dm).abs() < 1e-6 * dm.abs().max(1.0), "{g}");
                assert!((grad[1] - ds).abs() < 1e-6 * ds.abs().max(1.0), "{g}");
            }
        }
    }

    #[test]
    fn family_loss_matches_divergence_oracle() {
        use crate::policy::Distribution;
        let cfg = DivergenceBehaviorConfig::default();
        let q = Distribution::new(cfg.target.clone()).unwrap();
        for g in G::named_catalog() {
            let p = Distribution::new(cfg.family.probs(0.4, 0.2)).unwrap();
            let (loss, _) = family_divergence(&g, &cfg.family, &cfg.target, 0.4, 0.2).unwrap();
            assert!((loss - exact_f_divergence(&g, &p, &q).unwrap()).abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn basin_split_of_reference_target_is_the_midpoint() {
        let cfg = DivergenceBehaviorConfig::default();
        assert_eq!(GridDensityFamily::basin_split(&cfg.target), Some(50));
        let single = cfg.family.mixture(&[(0.5, 1.0)]);
        assert_eq!(GridDensityFamily::basin_split(&single), None);
        let (a, b) = GridDensityFamily::basin_masses(&cfg.target, 50);
        assert!((a - 0.5).abs() < 1e-9 && (b - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unimodal_target_is_recovered() {
        let family = GridDensityFamily::reference();
        let target = family.mixture(&[(0.7, 1.3)]);
        let cfg = DivergenceBehaviorConfig { target, ..DivergenceBehaviorConfig::default() };
        for row in run_divergence_behavior(&cfg).unwrap() {
            assert!((row.mu - 0.7).abs() < 0.12, "{row:?}");
            assert!((row.sigma - 1.3).abs() < 0.05, "{row:?}");
        }
    }

    #[test]
    fn reverse_kl_covers_both_reference_modes() {
        let rows = run_divergence_behavior(&DivergenceBehaviorConfig::default()).unwrap();
        let rkl = &rows[1];
        assert!(rkl.mass_basin_1.min(rkl.mass_basin_2) >= 0.2, "{rkl:?}");
        // the reference modes overlap enough that the best u·ln u fit is one broad bump
        let fkl = &rows[0];
        assert!(fkl.mu.abs() < 1e-6 && (fkl.sigma - 2.157).abs() < 1e-2, "{fkl:?}");
    }

    #[test]
    fn forward_kl_seeks_a_separated_mode() {
        let family = GridDensityFamily::reference();
        let target = family.mixture(&[(-2.0, 0.7), (2.0, 0.7)]);
        let cfg = DivergenceBehaviorConfig {
            target,
            generators: vec![G::ForwardKl, G::ReverseKl],
            ..DivergenceBehaviorConfig::default()
        };
        let rows = run_divergence_behavior(&cfg).unwrap();
        assert!(rows[0].mass_basin_1.max(rows[0].mass_basin_2) >= 0.99, "{:?}", rows[0]);
        assert!(rows[1].mass_basin_1.min(rows[1].mass_basin_2) >= 0.45, "{:?}", rows[1]);
    }

    #[test]
    fn json_output_is_an_array() {
        let rows = run_equivalence(&EquivalenceConfig { records: 10, ..EquivalenceConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_rows(&rows, OutputFormat::Json, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v.as_array().unwrap().len(), rows.len());
    }
}
