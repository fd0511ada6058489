//! Tabular policies over a finite prompt × response grid, the closed-form KL-regularized
//! optimum, geometric mixtures, log ratios and exact divergence oracles.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FpoError, Result};
use crate::generators::Generator;
use crate::scalar::{log_softmax, softmax, Scalar};

/// A probability vector over a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<T: Scalar> {
    probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(FpoError::Support("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(FpoError::Domain("probabilities must be finite and nonnegative".into()));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > T::simplex_tolerance(probs.len()) {
            return Err(FpoError::Domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Distribution { probs })
    }

    /// Softmax of unnormalized log-weights.
    pub fn from_logits(logits: &[T]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(FpoError::NonFinite("logits must be finite".into()));
        }
        Distribution::new(softmax(logits))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FpoError::Support("empty distribution".into()));
        }
        Ok(Distribution { probs: vec![T::one() / T::lit(n as f64); n] })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }
}

/// Logits and synthetic token lengths for every (prompt, response) cell.
///
/// Stored row-major: the row of prompt `x` holds the `num_responses` logits of `π(·|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy<T: Scalar> {
    num_prompts: usize,
    num_responses: usize,
    logits: Vec<T>,
    lengths: Vec<u32>,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn new(logits: Vec<Vec<T>>, lengths: Vec<Vec<u32>>) -> Result<Self> {
        let num_prompts = logits.len();
        let num_responses = logits.first().map_or(0, Vec::len);
        if lengths.len() != num_prompts {
            return Err(FpoError::Shape(format!("{} logit rows but {} length rows", num_prompts, lengths.len())));
        }
        if logits.iter().any(|r| r.len() != num_responses) || lengths.iter().any(|r| r.len() != num_responses) {
            return Err(FpoError::Shape("ragged logits or lengths".into()));
        }
        Self::from_flat(
            num_prompts,
            num_responses,
            logits.into_iter().flatten().collect(),
            lengths.into_iter().flatten().collect(),
        )
    }

    pub fn from_flat(num_prompts: usize, num_responses: usize, logits: Vec<T>, lengths: Vec<u32>) -> Result<Self> {
        if num_prompts == 0 || num_responses == 0 {
            return Err(FpoError::Shape("policy needs at least one prompt and one response".into()));
        }
        let cells = num_prompts * num_responses;
        if logits.len() != cells || lengths.len() != cells {
            return Err(FpoError::Shape(format!(
                "expected {cells} cells, got {} logits and {} lengths",
                logits.len(),
                lengths.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(FpoError::NonFinite("policy logits must be finite".into()));
        }
        if lengths.contains(&0) {
            return Err(FpoError::Length("response lengths must be at least 1".into()));
        }
        Ok(TabularPolicy { num_prompts, num_responses, logits, lengths })
    }

    /// All-zero logits (uniform distributions) with unit lengths.
    pub fn uniform(num_prompts: usize, num_responses: usize) -> Result<Self> {
        let cells = num_prompts * num_responses;
        Self::from_flat(num_prompts, num_responses, vec![T::zero(); cells], vec![1; cells])
    }

    /// Same shape and lengths, new logits.
    pub fn with_logits(&self, logits: Vec<T>) -> Result<Self> {
        Self::from_flat(self.num_prompts, self.num_responses, logits, self.lengths.clone())
    }

    /// Same shape and logits, new lengths.
    pub fn with_lengths(&self, lengths: Vec<u32>) -> Result<Self> {
        Self::from_flat(self.num_prompts, self.num_responses, self.logits.clone(), lengths)
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_prompts, self.num_responses)
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    pub fn logits_row(&self, prompt: usize) -> Result<&[T]> {
        self.check_prompt(prompt)?;
        let r = self.num_responses;
        Ok(&self.logits[prompt * r..(prompt + 1) * r])
    }

    pub fn length(&self, prompt: usize, response: usize) -> Result<u32> {
        self.check_cell(prompt, response)?;
        Ok(self.lengths[prompt * self.num_responses + response])
    }

    /// `softmax(logits[prompt])`.
    pub fn distribution(&self, prompt: usize) -> Result<Distribution<T>> {
        Distribution::from_logits(self.logits_row(prompt)?)
    }

    /// `log π(·|prompt)`.
    pub fn log_probs(&self, prompt: usize) -> Result<Vec<T>> {
        Ok(log_softmax(self.logits_row(prompt)?))
    }

    pub fn log_prob(&self, prompt: usize, response: usize) -> Result<T> {
        self.check_cell(prompt, response)?;
        Ok(self.log_probs(prompt)?[response])
    }

    pub fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.num_prompts {
            return Err(FpoError::Index(format!("prompt {prompt} out of range (num_prompts = {})", self.num_prompts)));
        }
        Ok(())
    }

    pub fn check_cell(&self, prompt: usize, response: usize) -> Result<()> {
        self.check_prompt(prompt)?;
        if response >= self.num_responses {
            return Err(FpoError::Index(format!(
                "response {response} out of range (num_responses = {})",
                self.num_responses
            )));
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &TabularPolicy<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(FpoError::Shape(format!("policy shapes differ: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }
}

/// Ground-truth reward `r(x, y)` on the same grid as the policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable<T: Scalar> {
    num_prompts: usize,
    num_responses: usize,
    values: Vec<T>,
}

impl<T: Scalar> RewardTable<T> {
    pub fn new(values: Vec<Vec<T>>) -> Result<Self> {
        let num_prompts = values.len();
        let num_responses = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != num_responses) {
            return Err(FpoError::Shape("ragged reward table".into()));
        }
        Self::from_flat(num_prompts, num_responses, values.into_iter().flatten().collect())
    }

    pub fn from_flat(num_prompts: usize, num_responses: usize, values: Vec<T>) -> Result<Self> {
        if num_prompts == 0 || num_responses == 0 || values.len() != num_prompts * num_responses {
            return Err(FpoError::Shape(format!(
                "reward table of {} values cannot be {num_prompts} x {num_responses}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FpoError::NonFinite("rewards must be finite".into()));
        }
        Ok(RewardTable { num_prompts, num_responses, values })
    }

    pub fn zeros(num_prompts: usize, num_responses: usize) -> Result<Self> {
        Self::from_flat(num_prompts, num_responses, vec![T::zero(); num_prompts * num_responses])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_prompts, self.num_responses)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, prompt: usize) -> Result<&[T]> {
        if prompt >= self.num_prompts {
            return Err(FpoError::Index(format!("prompt {prompt} out of range")));
        }
        let r = self.num_responses;
        Ok(&self.values[prompt * r..(prompt + 1) * r])
    }

    pub fn get(&self, prompt: usize, response: usize) -> Result<T> {
        let row = self.row(prompt)?;
        row.get(response).copied().ok_or_else(|| FpoError::Index(format!("response {response} out of range")))
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Result<Self> {
        Self::from_flat(self.num_prompts, self.num_responses, self.values.iter().map(|&v| v * factor).collect())
    }
}

fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    if !(beta.is_finite() && beta > T::zero()) {
        return Err(FpoError::Domain(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

fn check_reward_shape<T: Scalar>(reference: &TabularPolicy<T>, reward: &RewardTable<T>) -> Result<()> {
    if reference.shape() != reward.shape() {
        return Err(FpoError::Shape(format!(
            "policy shape {:?} does not match reward shape {:?}",
            reference.shape(),
            reward.shape()
        )));
    }
    Ok(())
}

/// `softmax(logits[prompt])`.
pub fn policy_distribution<T: Scalar>(policy: &TabularPolicy<T>, prompt: usize) -> Result<Distribution<T>> {
    policy.distribution(prompt)
}

/// Normalized `π_θ^β · π_ref^{1−β}` at `prompt`.
pub fn geometric_mixture<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    prompt: usize,
) -> Result<Distribution<T>> {
    policy.check_same_shape(reference)?;
    check_beta(beta)?;
    let lp = policy.log_probs(prompt)?;
    let lr = reference.log_probs(prompt)?;
    let mixed: Vec<T> = lp.iter().zip(&lr).map(|(&a, &b)| beta * a + (T::one() - beta) * b).collect();
    Distribution::from_logits(&mixed)
}

/// Closed-form optimum of the KL-regularized reward objective: `π_ref · exp(r/β) / Z(x)`.
pub fn optimal_policy<T: Scalar>(
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    beta: T,
    prompt: usize,
) -> Result<Distribution<T>> {
    check_beta(beta)?;
    tilted(reference, reward, T::one() / beta, prompt)
}

/// `π_ref · exp(r) / Z_r(x)`, the optimum's geometric-mixture image.
pub fn hatted_optimal_policy<T: Scalar>(
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    prompt: usize,
) -> Result<Distribution<T>> {
    tilted(reference, reward, T::one(), prompt)
}

fn tilted<T: Scalar>(
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    scale: T,
    prompt: usize,
) -> Result<Distribution<T>> {
    check_reward_shape(reference, reward)?;
    let lr = reference.logits_row(prompt)?;
    let r = reward.row(prompt)?;
    let logits: Vec<T> = lr.iter().zip(r).map(|(&l, &v)| l + scale * v).collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(FpoError::NonFinite("tilted log-weights overflowed".into()));
    }
    Distribution::from_logits(&logits)
}

/// `g_θ(x, y) = β·(log π_θ(y|x) − log π_ref(y|x))`.
pub fn log_ratio_g<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    prompt: usize,
    response: usize,
) -> Result<T> {
    policy.check_same_shape(reference)?;
    policy.check_cell(prompt, response)?;
    Ok(beta * (policy.log_prob(prompt, response)? - reference.log_prob(prompt, response)?))
}

/// `g_θ(x, ·)` for a whole prompt row.
pub fn log_ratio_row<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    prompt: usize,
) -> Result<Vec<T>> {
    policy.check_same_shape(reference)?;
    let lp = policy.log_probs(prompt)?;
    let lr = reference.log_probs(prompt)?;
    Ok(lp.iter().zip(&lr).map(|(&a, &b)| beta * (a - b)).collect())
}

/// `D_f(p ‖ q) = Σ_i q_i · f(p_i / q_i)`, in exactly that argument order.
///
/// Zero cells: `p_i = q_i = 0` contributes nothing; `q_i > 0 = p_i` contributes `q_i·f(0)`;
/// `p_i > 0 = q_i` contributes `p_i · lim f(u)/u`. Either of the last two is a
/// [`FpoError::Support`] error when the generator has no finite value there.
pub fn exact_f_divergence<T: Scalar>(gen: &Generator<T>, p: &Distribution<T>, q: &Distribution<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(FpoError::Support(format!("support sizes differ: {} vs {}", p.len(), q.len())));
    }
    let mut total = T::zero();
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let term = match (pi > T::zero(), qi > T::zero()) {
            (true, true) => qi * gen.eval_ln(pi.ln() - qi.ln())?,
            (false, true) => {
                let f0 = gen.value_at_zero().ok_or_else(|| {
                    FpoError::Support(format!("p has a zero where q is positive and {gen} has a pole at 0"))
                })?;
                qi * f0
            }
            (true, false) => {
                let slope = gen.recession_slope().ok_or_else(|| {
                    FpoError::Support(format!("q has a zero where p is positive and {gen} grows superlinearly"))
                })?;
                pi * slope
            }
            (false, false) => T::zero(),
        };
        total = total + term;
    }
    Ok(total)
}

/// `½·Σ|p_i − q_i|`.
pub fn tv_distance<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(FpoError::Support(format!("support sizes differ: {} vs {}", p.len(), q.len())));
    }
    let s: T = p.probs().iter().zip(q.probs()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok((s / T::lit(2.0)).min(T::one()))
}

/// Mean over prompts of `TV(π̂_θ, π̂*)`.
pub fn mean_tv_hatted<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    beta: T,
) -> Result<T> {
    let mut acc = T::zero();
    for x in 0..policy.num_prompts() {
        let a = geometric_mixture(policy, reference, beta, x)?;
        let b = hatted_optimal_policy(reference, reward, x)?;
        acc = acc + tv_distance(&a, &b)?;
    }
    Ok(acc / T::lit(policy.num_prompts() as f64))
}

/// Mean over prompts of `TV(π_θ, π*)`.
pub fn mean_tv_optimal<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    beta: T,
) -> Result<T> {
    policy.check_same_shape(reference)?;
    let mut acc = T::zero();
    for x in 0..policy.num_prompts() {
        let a = policy.distribution(x)?;
        let b = optimal_policy(reference, reward, beta, x)?;
        acc = acc + tv_distance(&a, &b)?;
    }
    Ok(acc / T::lit(policy.num_prompts() as f64))
}

/// Policy whose logits are `log π*` for every prompt.
pub fn optimal_policy_table<T: Scalar>(
    reference: &TabularPolicy<T>,
    reward: &RewardTable<T>,
    beta: T,
) -> Result<TabularPolicy<T>> {
    let mut logits = Vec::with_capacity(reference.logits().len());
    for x in 0..reference.num_prompts() {
        let d = optimal_policy(reference, reward, beta, x)?;
        logits.extend(d.probs().iter().map(|p| p.ln()));
    }
    reference.with_logits(logits)
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    num_prompts: usize,
    num_responses: usize,
    logits: Vec<Vec<f64>>,
    lengths: Vec<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
struct RewardDoc {
    values: Vec<Vec<f64>>,
}

fn rows<T: Scalar>(flat: &[T], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect()
}

impl<T: Scalar> Serialize for TabularPolicy<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyDoc {
            num_prompts: self.num_prompts,
            num_responses: self.num_responses,
            logits: rows(&self.logits, self.num_responses),
            lengths: self.lengths.chunks(self.num_responses).map(<[u32]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for TabularPolicy<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = PolicyDoc::deserialize(d)?;
        let (np, nr) = (doc.num_prompts, doc.num_responses);
        let policy = TabularPolicy::new(
            doc.logits.into_iter().map(|r| r.into_iter().map(T::lit).collect()).collect(),
            doc.lengths,
        )
        .map_err(serde::de::Error::custom)?;
        if policy.shape() != (np, nr) {
            return Err(serde::de::Error::custom(format!(
                "declared shape {np} x {nr} does not match data {:?}",
                policy.shape()
            )));
        }
        Ok(policy)
    }
}

impl<T: Scalar> Serialize for RewardTable<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RewardDoc { values: rows(&self.values, self.num_responses) }.serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for RewardTable<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = RewardDoc::deserialize(d)?;
        RewardTable::new(doc.values.into_iter().map(|r| r.into_iter().map(T::lit).collect()).collect())
            .map_err(serde::de::Error::custom)
    }
}
