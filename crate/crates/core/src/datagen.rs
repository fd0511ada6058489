//! Synthetic tasks and the two dataset protocols: Bradley–Terry preference pairs and
//! reward-labeled K-sample records.
//!
//! Every sampler is a pure function of its arguments and seed (ChaCha8 streams).

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FpoError, Result};
use crate::losses::{KSampleBatch, KSampleRecord, PairwiseBatch, PairwiseRecord};
use crate::policy::{RewardTable, TabularPolicy};
use crate::scalar::{sigmoid, Scalar};

/// Default half-width of the uniform reward range.
pub const DEFAULT_REWARD_SCALE: f64 = 3.0;
/// Response lengths are drawn uniformly from `1..=MAX_LENGTH`.
pub const MAX_LENGTH: u32 = 20;

/// A reference policy with a ground-truth reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SyntheticTask<T: Scalar> {
    pub reference: TabularPolicy<T>,
    pub reward: RewardTable<T>,
    /// Regularization strength that defines the evaluation optimum.
    pub beta_star: T,
}

/// Reference logits i.i.d. standard normal, rewards uniform in `[−reward_scale, reward_scale]`.
pub fn make_synthetic_task<T: Scalar>(
    seed: u64,
    num_prompts: usize,
    num_responses: usize,
    beta_star: T,
    reward_scale: T,
) -> Result<SyntheticTask<T>> {
    if num_prompts < 2 || num_responses < 2 {
        return Err(FpoError::Config(format!(
            "task needs at least 2 prompts and 2 responses, got {num_prompts}×{num_responses}"
        )));
    }
    if !(beta_star.is_finite() && beta_star > T::zero()) {
        return Err(FpoError::Config("beta_star must be positive".into()));
    }
    if !(reward_scale.is_finite() && reward_scale >= T::zero()) {
        return Err(FpoError::Config("reward scale must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_prompts * num_responses;
    let logits: Vec<T> = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    let lengths: Vec<u32> = (0..n).map(|_| rng.random_range(1..=MAX_LENGTH)).collect();
    let scale = reward_scale.as_f64();
    let rewards: Vec<T> = (0..n).map(|_| T::lit(scale * rng.random_range(-1.0..=1.0))).collect();
    Ok(SyntheticTask {
        reference: TabularPolicy::from_flat(num_prompts, num_responses, logits, lengths)?,
        reward: RewardTable::from_flat(num_prompts, num_responses, rewards)?,
        beta_star,
    })
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn shape(&self) -> (usize, usize) {
        self.reference.shape()
    }

    // log π_ref(·|x) at the given sampling temperature, up to a constant.
    fn sampling_log_weights(&self, prompt: usize, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(FpoError::Config("sampling temperature must be positive".into()));
        }
        Ok(self.reference.logits_row(prompt)?.iter().map(|v| v.as_f64() / temperature).collect())
    }
}

/// Sampling knobs shared by both dataset protocols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    /// Temperature applied to `π_ref` when drawing responses.
    pub temperature: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions { temperature: 1.0 }
    }
}

// `k` distinct indices distributed like successive draws proportional to the remaining
// weights (Gumbel top-k, which stays exact when the weights underflow).
fn sample_without_replacement(rng: &mut ChaCha8Rng, log_weights: &[f64], k: usize) -> Vec<usize> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let keys: Vec<f64> = log_weights.iter().map(|lw| lw + rng.sample(gumbel)).collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    order.truncate(k);
    order
}

/// `n` Bradley–Terry comparisons without rewards attached.
///
/// Per record the prompt is uniform, two distinct responses are drawn from `π_ref(·|x)` and the
/// first wins with probability `σ(r_a − r_b)`.
pub fn sample_preferences<T: Scalar>(task: &SyntheticTask<T>, n: usize, seed: u64) -> Result<PairwiseBatch<T>> {
    sample_preferences_with(task, n, seed, SamplingOptions::default())
}

pub fn sample_preferences_with<T: Scalar>(
    task: &SyntheticTask<T>,
    n: usize,
    seed: u64,
    opts: SamplingOptions,
) -> Result<PairwiseBatch<T>> {
    if n == 0 {
        return Err(FpoError::Config("need at least one record".into()));
    }
    let (np, _) = task.shape();
    let weights: Vec<Vec<f64>> =
        (0..np).map(|x| task.sampling_log_weights(x, opts.temperature)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0..np);
        let pair = sample_without_replacement(&mut rng, &weights[x], 2);
        let (a, b) = (pair[0], pair[1]);
        let p_a = sigmoid(task.reward.get(x, a)? - task.reward.get(x, b)?).as_f64();
        let (winner, loser) = if rng.random::<f64>() < p_a { (a, b) } else { (b, a) };
        records.push(PairwiseRecord { prompt: x, winner, loser, rewards: None });
    }
    PairwiseBatch::new(records)
}

/// `n` comparisons of one fixed `(prompt, a, b)` pair labeled by Bradley–Terry draws.
pub fn sample_fixed_pair<T: Scalar>(
    task: &SyntheticTask<T>,
    prompt: usize,
    a: usize,
    b: usize,
    n: usize,
    seed: u64,
) -> Result<PairwiseBatch<T>> {
    task.reference.check_cell(prompt, a)?;
    task.reference.check_cell(prompt, b)?;
    let p_a = sigmoid(task.reward.get(prompt, a)? - task.reward.get(prompt, b)?).as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let (winner, loser) = if rng.random::<f64>() < p_a { (a, b) } else { (b, a) };
            PairwiseRecord { prompt, winner, loser, rewards: None }
        })
        .collect();
    PairwiseBatch::new(records)
}

/// `n` reward-labeled records of `k` distinct responses.
///
/// Sampled mode draws the prompt uniformly and the responses from `π_ref(·|x)` without
/// replacement. `full_support` lists every response (so `k` must equal the response count) and
/// cycles through prompts in order.
pub fn sample_reward_dataset<T: Scalar>(
    task: &SyntheticTask<T>,
    n: usize,
    k: usize,
    seed: u64,
    full_support: bool,
) -> Result<KSampleBatch<T>> {
    sample_reward_dataset_with(task, n, k, seed, full_support, SamplingOptions::default())
}

pub fn sample_reward_dataset_with<T: Scalar>(
    task: &SyntheticTask<T>,
    n: usize,
    k: usize,
    seed: u64,
    full_support: bool,
    opts: SamplingOptions,
) -> Result<KSampleBatch<T>> {
    let (np, nr) = task.shape();
    if k < 2 || k > nr {
        return Err(FpoError::Config(format!("K must lie in [2, {nr}], got {k}")));
    }
    if full_support && k != nr {
        return Err(FpoError::Config(format!("full support lists all {nr} responses, got K = {k}")));
    }
    if n == 0 {
        return Err(FpoError::Config("need at least one record".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (x, responses) = if full_support {
            (i % np, (0..nr).collect())
        } else {
            let x = rng.random_range(0..np);
            (x, sample_without_replacement(&mut rng, &task.sampling_log_weights(x, opts.temperature)?, k))
        };
        let rewards = responses.iter().map(|&y| task.reward.get(x, y)).collect::<Result<_>>()?;
        records.push(KSampleRecord { prompt: x, responses, rewards });
    }
    KSampleBatch::new(records)
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    x: usize,
    yw: usize,
    yl: usize,
}

#[derive(Serialize, Deserialize)]
struct RewardLine {
    x: usize,
    ys: Vec<usize>,
    rs: Vec<f64>,
}

/// One `{"x", "yw", "yl"}` object per line.
pub fn write_pairwise_jsonl<T: Scalar, W: Write>(batch: &PairwiseBatch<T>, mut out: W) -> Result<()> {
    for r in batch.records() {
        crate::json::to_writer(&mut out, &PairLine { x: r.prompt, yw: r.winner, yl: r.loser })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// One `{"x", "ys", "rs"}` object per line.
pub fn write_ksample_jsonl<T: Scalar, W: Write>(batch: &KSampleBatch<T>, mut out: W) -> Result<()> {
    for r in batch.records() {
        let line =
            RewardLine { x: r.prompt, ys: r.responses.clone(), rs: r.rewards.iter().map(|v| v.as_f64()).collect() };
        crate::json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_lines<L: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<L>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FpoError::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn read_pairwise_jsonl<T: Scalar, R: BufRead>(input: R) -> Result<PairwiseBatch<T>> {
    let lines: Vec<PairLine> = parse_lines(input)?;
    PairwiseBatch::new(
        lines.into_iter().map(|l| PairwiseRecord { prompt: l.x, winner: l.yw, loser: l.yl, rewards: None }).collect(),
    )
}

pub fn read_ksample_jsonl<T: Scalar, R: BufRead>(input: R) -> Result<KSampleBatch<T>> {
    let lines: Vec<RewardLine> = parse_lines(input)?;
    KSampleBatch::new(
        lines
            .into_iter()
            .map(|l| KSampleRecord { prompt: l.x, responses: l.ys, rewards: l.rs.into_iter().map(T::lit).collect() })
            .collect(),
    )
}
