//! The f-PO objective family and its reference oracles.
//!
//! Every variant is, per record, a discrete f-divergence between the policy's normalized
//! implicit rewards and a target distribution over the record's responses:
//!
//! * [`fpo_loss_general`]: K responses with rewards. Target `softmax(r)`, model `softmax(g_θ)`.
//! * [`fpo_loss_pairwise_reward`]: K = 2 with rewards. Target `(σ(r_w − r_l), σ(r_l − r_w))`.
//! * [`fpo_loss_pairwise_smoothed`]: K = 2 without rewards. Target `(1 − ε, ε)`.
//! * SimPO-style: the smoothed loss driven by the reference-free margin of [`simpo_style_delta`].
//!
//! `g_θ(x, y) = β·(log π_θ(y|x) − log π_ref(y|x))`. Within a prompt the softmax normalizers of
//! `π_θ` and `π_ref` shift every `g_θ` by the same constant, which every variant except the
//! SimPO-style one is invariant to, so those variants read `g_θ` straight off the logits.
//! Gradients are derived by hand and checked by [`loss_gradient_check`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FpoError, Result};
use crate::generators::Generator;
use crate::policy::TabularPolicy;
use crate::scalar::{log_sigmoid, log_softmax, log_sum_exp, sigmoid, softmax, Scalar};

/// Label smoothing used when none is given.
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Preference probabilities from rewards are clamped to `[P_CLAMP, 1 − P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    GeneralK,
    PairwiseReward,
    PairwiseSmoothed,
    #[serde(rename = "simpo_style")]
    SimPoStyle,
}

/// How per-record losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T: Scalar> {
    pub generator: Generator<T>,
    /// Scale of the log ratio `g_θ`.
    pub beta: T,
    /// Label smoothing for the pairwise-without-reward variants. `0` selects the ε → 0 limit.
    pub epsilon: T,
    pub variant: LossVariant,
    /// Target margin; present exactly for [`LossVariant::SimPoStyle`].
    pub gamma: Option<T>,
    pub reduction: Reduction,
    /// Rewards are divided by this before they are normalized into targets.
    pub reward_temperature: T,
}

impl<T: Scalar> LossConfig<T> {
    fn base(generator: Generator<T>, beta: T, variant: LossVariant) -> Self {
        LossConfig {
            generator,
            beta,
            epsilon: T::lit(DEFAULT_EPSILON),
            variant,
            gamma: None,
            reduction: Reduction::Mean,
            reward_temperature: T::one(),
        }
    }

    pub fn general(generator: Generator<T>, beta: T) -> Self {
        Self::base(generator, beta, LossVariant::GeneralK)
    }

    pub fn pairwise_reward(generator: Generator<T>, beta: T) -> Self {
        Self::base(generator, beta, LossVariant::PairwiseReward)
    }

    pub fn pairwise_smoothed(generator: Generator<T>, beta: T, epsilon: T) -> Self {
        LossConfig { epsilon, ..Self::base(generator, beta, LossVariant::PairwiseSmoothed) }
    }

    pub fn simpo_style(generator: Generator<T>, beta: T, epsilon: T, gamma: T) -> Self {
        LossConfig { epsilon, gamma: Some(gamma), ..Self::base(generator, beta, LossVariant::SimPoStyle) }
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > T::zero()) {
            return Err(FpoError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.reward_temperature.is_finite() && self.reward_temperature > T::zero()) {
            return Err(FpoError::Config("reward temperature must be positive".into()));
        }
        match (self.variant, self.gamma) {
            (LossVariant::SimPoStyle, None) => return Err(FpoError::Config("simpo_style requires gamma".into())),
            (LossVariant::SimPoStyle, Some(g)) if !g.is_finite() => {
                return Err(FpoError::Config("gamma must be finite".into()))
            }
            (LossVariant::SimPoStyle, Some(_)) => {}
            (_, Some(_)) => return Err(FpoError::Config("gamma is only used by simpo_style".into())),
            (_, None) => {}
        }
        if matches!(self.variant, LossVariant::PairwiseSmoothed | LossVariant::SimPoStyle) {
            check_epsilon(&self.generator, self.epsilon)?;
        }
        Ok(())
    }
}

fn check_epsilon<T: Scalar>(gen: &Generator<T>, epsilon: T) -> Result<()> {
    if !(epsilon >= T::zero() && epsilon <= T::lit(0.5)) {
        return Err(FpoError::Config(format!("epsilon must lie in [0, 0.5], got {epsilon}")));
    }
    if epsilon == T::zero() && gen.recession_slope().is_none() {
        return Err(FpoError::Config(format!("epsilon = 0 has no finite limit for generator {gen}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LossConfigDoc {
    generator: String,
    beta: f64,
    epsilon: f64,
    variant: LossVariant,
    gamma: Option<f64>,
    #[serde(default)]
    reduction: Reduction,
    #[serde(default = "one")]
    reward_temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl<T: Scalar> Serialize for LossConfig<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LossConfigDoc {
            generator: self.generator.name(),
            beta: self.beta.as_f64(),
            epsilon: self.epsilon.as_f64(),
            variant: self.variant,
            gamma: self.gamma.map(Scalar::as_f64),
            reduction: self.reduction,
            reward_temperature: self.reward_temperature.as_f64(),
        }
        .serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for LossConfig<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = LossConfigDoc::deserialize(d)?;
        let cfg = LossConfig {
            generator: doc.generator.parse().map_err(serde::de::Error::custom)?,
            beta: T::lit(doc.beta),
            epsilon: T::lit(doc.epsilon),
            variant: doc.variant,
            gamma: doc.gamma.map(T::lit),
            reduction: doc.reduction,
            reward_temperature: T::lit(doc.reward_temperature),
        };
        cfg.validate().map_err(serde::de::Error::custom)?;
        Ok(cfg)
    }
}

/// One `(x, y_w, y_l)` comparison, optionally with the two rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseRecord<T: Scalar> {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
    pub rewards: Option<(T, T)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairwiseBatch<T: Scalar> {
    records: Vec<PairwiseRecord<T>>,
}

impl<T: Scalar> PairwiseBatch<T> {
    pub fn new(records: Vec<PairwiseRecord<T>>) -> Result<Self> {
        for r in &records {
            if r.winner == r.loser {
                return Err(FpoError::Config(format!(
                    "record for prompt {} compares response {} with itself",
                    r.prompt, r.winner
                )));
            }
            if let Some((a, b)) = r.rewards {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(FpoError::DegenerateReward("non-finite reward".into()));
                }
            }
        }
        Ok(PairwiseBatch { records })
    }

    /// Records without rewards from `(prompt, winner, loser)` triples.
    pub fn from_triples(triples: &[(usize, usize, usize)]) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(prompt, winner, loser)| PairwiseRecord { prompt, winner, loser, rewards: None })
                .collect(),
        )
    }

    pub fn records(&self) -> &[PairwiseRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_against(&self, policy: &TabularPolicy<T>) -> Result<()> {
        for r in &self.records {
            policy.check_cell(r.prompt, r.winner)?;
            policy.check_cell(r.prompt, r.loser)?;
        }
        Ok(())
    }

    /// Subset of records, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        PairwiseBatch { records: indices.iter().map(|&i| self.records[i]).collect() }
    }
}

/// K reward-labeled responses for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct KSampleRecord<T: Scalar> {
    pub prompt: usize,
    pub responses: Vec<usize>,
    pub rewards: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KSampleBatch<T: Scalar> {
    records: Vec<KSampleRecord<T>>,
}

impl<T: Scalar> KSampleBatch<T> {
    pub fn new(records: Vec<KSampleRecord<T>>) -> Result<Self> {
        for r in &records {
            if r.responses.len() < 2 {
                return Err(FpoError::Config("K-sample records need K >= 2".into()));
            }
            if r.responses.len() != r.rewards.len() {
                return Err(FpoError::Shape(format!(
                    "{} responses but {} rewards",
                    r.responses.len(),
                    r.rewards.len()
                )));
            }
            let distinct: BTreeSet<_> = r.responses.iter().collect();
            if distinct.len() != r.responses.len() {
                return Err(FpoError::Config("responses within a record must be distinct".into()));
            }
            if r.rewards.iter().any(|v| !v.is_finite()) {
                return Err(FpoError::DegenerateReward("non-finite reward".into()));
            }
        }
        Ok(KSampleBatch { records })
    }

    pub fn records(&self) -> &[KSampleRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn check_against(&self, policy: &TabularPolicy<T>) -> Result<()> {
        for r in &self.records {
            for &y in &r.responses {
                policy.check_cell(r.prompt, y)?;
            }
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        KSampleBatch { records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }
}

/// Training data of either protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset<T: Scalar> {
    Pairwise(PairwiseBatch<T>),
    KSample(KSampleBatch<T>),
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Pairwise(b) => b.len(),
            Dataset::KSample(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Dataset::Pairwise(b) => Dataset::Pairwise(b.select(indices)),
            Dataset::KSample(b) => Dataset::KSample(b.select(indices)),
        }
    }
}

/// Reduced loss and its gradient with respect to the policy logits (row-major, like the logits).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T: Scalar> {
    pub loss: T,
    pub gradient: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    pub fn grad_inf_norm(&self) -> T {
        self.gradient.iter().fold(T::zero(), |m, g| m.max(g.abs()))
    }

    pub fn grad_l2_norm(&self) -> T {
        self.gradient.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}

/// Loss and `∂loss/∂Δ` of one pairwise record with target weights `(a, b)`, `a + b = 1`, given
/// as logarithms. `ln_b = -inf` selects the `b → 0` limit `f(σ(Δ)) + σ(−Δ)·lim f(u)/u`.
pub fn pairwise_record_loss<T: Scalar>(gen: &Generator<T>, ln_a: T, ln_b: T, delta: T) -> Result<(T, T)> {
    let ls_pos = log_sigmoid(delta);
    let ls_neg = log_sigmoid(-delta);
    // σ′(Δ) = σ(Δ)σ(−Δ)
    let dsig = (ls_pos + ls_neg).exp();
    let a = ln_a.exp();
    let ln_u1 = ls_pos - ln_a;
    let term1 = a * gen.eval_ln(ln_u1)?;
    let d1 = gen.derivative_ln(ln_u1)?;
    if ln_b == T::neg_infinity() {
        let slope = gen
            .recession_slope()
            .ok_or_else(|| FpoError::Config(format!("epsilon = 0 has no finite limit for generator {gen}")))?;
        let loss = term1 + sigmoid(-delta) * slope;
        return Ok((loss, dsig * (d1 - slope)));
    }
    let b = ln_b.exp();
    let ln_u2 = ls_neg - ln_b;
    let term2 = b * gen.eval_ln(ln_u2)?;
    let d2 = gen.derivative_ln(ln_u2)?;
    Ok((term1 + term2, dsig * (d1 - d2)))
}

/// Loss `Σ_i w_i·f(v_i/w_i)` with `v = softmax(g)`, `w = softmax(r)`, and `∂loss/∂g`.
///
/// Repeated responses are allowed here; batches reject them, Monte Carlo estimators need them.
pub fn ksample_record_loss<T: Scalar>(gen: &Generator<T>, g: &[T], r: &[T]) -> Result<(T, Vec<T>)> {
    if g.len() != r.len() || g.len() < 2 {
        return Err(FpoError::Shape(format!("need matching g and r of length >= 2, got {} and {}", g.len(), r.len())));
    }
    let ln_v = log_softmax(g);
    let ln_w = log_softmax(r);
    let v = softmax(g);
    let mut loss = T::zero();
    let mut df = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let ln_u = ln_v[i] - ln_w[i];
        loss = loss + ln_w[i].exp() * gen.eval_ln(ln_u)?;
        df.push(gen.derivative_ln(ln_u)?);
    }
    let mean_df: T = v.iter().zip(&df).map(|(&vi, &d)| vi * d).sum();
    let grad = v.iter().zip(&df).map(|(&vi, &d)| vi * (d - mean_df)).collect();
    Ok((loss, grad))
}

fn reduce<T: Scalar>(reduction: Reduction, n: usize, mut value: LossValue<T>) -> LossValue<T> {
    if reduction == Reduction::Mean {
        let scale = T::one() / T::lit(n as f64);
        value.loss = value.loss * scale;
        value.gradient.iter_mut().for_each(|g| *g = *g * scale);
    }
    value
}

fn nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(FpoError::Config("empty batch".into()));
    }
    Ok(())
}

// β·((θ_w − θ_l) − (ρ_w − ρ_l)): the log-partition terms cancel.
fn pairwise_margin<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    rec: &PairwiseRecord<T>,
) -> T {
    let r = policy.num_responses();
    let (w, l) = (rec.prompt * r + rec.winner, rec.prompt * r + rec.loser);
    let (th, rho) = (policy.logits(), reference.logits());
    beta * ((th[w] - th[l]) - (rho[w] - rho[l]))
}

fn prepare_pairwise<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    batch: &PairwiseBatch<T>,
) -> Result<()> {
    policy.check_same_shape(reference)?;
    batch.check_against(policy)?;
    nonempty(batch.len())
}

/// General K-sample objective, one exact discrete f-divergence per record.
pub fn fpo_loss_general<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    batch: &KSampleBatch<T>,
) -> Result<LossValue<T>> {
    cfg.validate()?;
    policy.check_same_shape(reference)?;
    batch.check_against(policy)?;
    nonempty(batch.len())?;
    let nr = policy.num_responses();
    let (th, rho) = (policy.logits(), reference.logits());
    let mut out = LossValue { loss: T::zero(), gradient: vec![T::zero(); th.len()] };
    for rec in batch.records() {
        let base = rec.prompt * nr;
        let g: Vec<T> = rec.responses.iter().map(|&y| cfg.beta * (th[base + y] - rho[base + y])).collect();
        let r: Vec<T> = rec.rewards.iter().map(|&v| v / cfg.reward_temperature).collect();
        let (loss, dg) = ksample_record_loss(&cfg.generator, &g, &r)?;
        out.loss = out.loss + loss;
        for (&y, &d) in rec.responses.iter().zip(&dg) {
            out.gradient[base + y] = out.gradient[base + y] + cfg.beta * d;
        }
    }
    Ok(reduce(cfg.reduction, batch.len(), out))
}

/// Pairwise objective with targets `σ(r_w − r_l)` and `σ(r_l − r_w)`.
pub fn fpo_loss_pairwise_reward<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    batch: &PairwiseBatch<T>,
) -> Result<LossValue<T>> {
    cfg.validate()?;
    prepare_pairwise(policy, reference, batch)?;
    let nr = policy.num_responses();
    // logit(1e-12)
    let clamp = -(T::lit(P_CLAMP).ln() - (-T::lit(P_CLAMP)).ln_1p());
    let mut out = LossValue { loss: T::zero(), gradient: vec![T::zero(); policy.logits().len()] };
    for rec in batch.records() {
        let (rw, rl) =
            rec.rewards.ok_or_else(|| FpoError::Config("pairwise_reward needs rewards on every record".into()))?;
        let dr = ((rw - rl) / cfg.reward_temperature).max(-clamp).min(clamp);
        let delta = pairwise_margin(policy, reference, cfg.beta, rec);
        let (loss, dd) = pairwise_record_loss(&cfg.generator, log_sigmoid(dr), log_sigmoid(-dr), delta)?;
        out.loss = out.loss + loss;
        let base = rec.prompt * nr;
        out.gradient[base + rec.winner] = out.gradient[base + rec.winner] + cfg.beta * dd;
        out.gradient[base + rec.loser] = out.gradient[base + rec.loser] - cfg.beta * dd;
    }
    Ok(reduce(cfg.reduction, batch.len(), out))
}

/// Pairwise objective with smoothed labels `(1 − ε, ε)`.
///
/// For [`LossVariant::SimPoStyle`] configs the margin is the reference-free
/// [`simpo_style_delta`] and `reference` is only shape-checked.
pub fn fpo_loss_pairwise_smoothed<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    batch: &PairwiseBatch<T>,
) -> Result<LossValue<T>> {
    check_epsilon(&cfg.generator, cfg.epsilon)?;
    cfg.validate()?;
    prepare_pairwise(policy, reference, batch)?;
    let (ln_a, ln_b) = smoothing_logs(cfg.epsilon);
    let nr = policy.num_responses();
    let mut out = LossValue { loss: T::zero(), gradient: vec![T::zero(); policy.logits().len()] };
    for rec in batch.records() {
        let base = rec.prompt * nr;
        if cfg.variant == LossVariant::SimPoStyle {
            let gamma = cfg.gamma.unwrap_or_else(T::zero);
            let m = simpo_margin(policy, cfg.beta, gamma, rec.prompt, rec.winner, rec.loser)?;
            let (loss, dd) = pairwise_record_loss(&cfg.generator, ln_a, ln_b, m.delta)?;
            out.loss = out.loss + loss;
            for (k, &dk) in m.grad.iter().enumerate() {
                out.gradient[base + k] = out.gradient[base + k] + dd * dk;
            }
        } else {
            let delta = pairwise_margin(policy, reference, cfg.beta, rec);
            let (loss, dd) = pairwise_record_loss(&cfg.generator, ln_a, ln_b, delta)?;
            out.loss = out.loss + loss;
            out.gradient[base + rec.winner] = out.gradient[base + rec.winner] + cfg.beta * dd;
            out.gradient[base + rec.loser] = out.gradient[base + rec.loser] - cfg.beta * dd;
        }
    }
    Ok(reduce(cfg.reduction, batch.len(), out))
}

/// SimPO-style objective: the smoothed pairwise loss on the length-normalized margin.
pub fn fpo_loss_simpo_style<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    batch: &PairwiseBatch<T>,
) -> Result<LossValue<T>> {
    if cfg.variant != LossVariant::SimPoStyle {
        return Err(FpoError::Config("fpo_loss_simpo_style needs a simpo_style config".into()));
    }
    fpo_loss_pairwise_smoothed(cfg, policy, policy, batch)
}

fn smoothing_logs<T: Scalar>(epsilon: T) -> (T, T) {
    if epsilon == T::zero() {
        (T::zero(), T::neg_infinity())
    } else {
        ((-epsilon).ln_1p(), epsilon.ln())
    }
}

/// Evaluates whichever variant `cfg` selects on matching data.
pub fn evaluate<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &Dataset<T>,
) -> Result<LossValue<T>> {
    match (cfg.variant, data) {
        (LossVariant::GeneralK, Dataset::KSample(b)) => fpo_loss_general(cfg, policy, reference, b),
        (LossVariant::PairwiseReward, Dataset::Pairwise(b)) => fpo_loss_pairwise_reward(cfg, policy, reference, b),
        (LossVariant::PairwiseSmoothed | LossVariant::SimPoStyle, Dataset::Pairwise(b)) => {
            fpo_loss_pairwise_smoothed(cfg, policy, reference, b)
        }
        (v, _) => Err(FpoError::Config(format!("variant {v:?} does not match the dataset kind"))),
    }
}

/// DPO: mean of `−ln σ(Δ)`.
pub fn dpo_loss<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    batch: &PairwiseBatch<T>,
) -> Result<LossValue<T>> {
    prepare_pairwise(policy, reference, batch)?;
    let nr = policy.num_responses();
    let mut out = LossValue { loss: T::zero(), gradient: vec![T::zero(); policy.logits().len()] };
    for rec in batch.records() {
        let delta = pairwise_margin(policy, reference, beta, rec);
        out.loss = out.loss - log_sigmoid(delta);
        let dd = -sigmoid(-delta);
        let base = rec.prompt * nr;
        out.gradient[base + rec.winner] = out.gradient[base + rec.winner] + beta * dd;
        out.gradient[base + rec.loser] = out.gradient[base + rec.loser] - beta * dd;
    }
    Ok(reduce(Reduction::Mean, batch.len(), out))
}

/// EXO: mean of `σ(Δ)·ln(σ(Δ)/(1 − ε)) + σ(−Δ)·ln(σ(−Δ)/ε)`.
pub fn exo_loss<T: Scalar>(
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    beta: T,
    epsilon: T,
    batch: &PairwiseBatch<T>,
) -> Result<LossValue<T>> {
    if !(epsilon > T::zero() && epsilon <= T::lit(0.5)) {
        return Err(FpoError::Config(format!("EXO needs epsilon in (0, 0.5], got {epsilon}")));
    }
    prepare_pairwise(policy, reference, batch)?;
    let nr = policy.num_responses();
    let ln_keep = (-epsilon).ln_1p();
    let ln_eps = epsilon.ln();
    let mut out = LossValue { loss: T::zero(), gradient: vec![T::zero(); policy.logits().len()] };
    for rec in batch.records() {
        let delta = pairwise_margin(policy, reference, beta, rec);
        out.loss = out.loss + exo_record(delta, epsilon);
        // d/dΔ = σ′(Δ)·(Δ + ln ε − ln(1 − ε))
        let dd = sigmoid(delta) * sigmoid(-delta) * (delta + ln_eps - ln_keep);
        let base = rec.prompt * nr;
        out.gradient[base + rec.winner] = out.gradient[base + rec.winner] + beta * dd;
        out.gradient[base + rec.loser] = out.gradient[base + rec.loser] - beta * dd;
    }
    Ok(reduce(Reduction::Mean, batch.len(), out))
}

/// EXO record loss for margin `delta`.
pub fn exo_record<T: Scalar>(delta: T, epsilon: T) -> T {
    let (ls_pos, ls_neg) = (log_sigmoid(delta), log_sigmoid(-delta));
    sigmoid(delta) * (ls_pos - (-epsilon).ln_1p()) + sigmoid(-delta) * (ls_neg - epsilon.ln())
}

struct SimpoMargin<T> {
    delta: T,
    /// ∂Δ̂/∂θ over the prompt's row.
    grad: Vec<T>,
}

fn simpo_margin<T: Scalar>(
    policy: &TabularPolicy<T>,
    beta: T,
    gamma: T,
    prompt: usize,
    winner: usize,
    loser: usize,
) -> Result<SimpoMargin<T>> {
    policy.check_cell(prompt, winner)?;
    policy.check_cell(prompt, loser)?;
    let (lw, ll) = (policy.length(prompt, winner)?, policy.length(prompt, loser)?);
    if lw == 0 || ll == 0 {
        return Err(FpoError::Length("response length 0".into()));
    }
    let row = policy.logits_row(prompt)?;
    let cw = beta / T::lit(lw as f64);
    let cl = beta / T::lit(ll as f64);
    // log π = θ − LSE(θ); the LSE terms vanish exactly when the lengths agree
    let lse_coeff = cw - cl;
    let lse = log_sum_exp(row);
    let delta = cw * row[winner] - cl * row[loser] - lse_coeff * lse - gamma;
    let probs = softmax(row);
    let mut grad: Vec<T> = probs.iter().map(|&p| -lse_coeff * p).collect();
    grad[winner] = grad[winner] + cw;
    grad[loser] = grad[loser] - cl;
    Ok(SimpoMargin { delta, grad })
}

/// Reference-free margin `β/|y_w|·log π_θ(y_w|x) − β/|y_l|·log π_θ(y_l|x) − γ`.
pub fn simpo_style_delta<T: Scalar>(
    policy: &TabularPolicy<T>,
    beta: T,
    gamma: T,
    prompt: usize,
    winner: usize,
    loser: usize,
) -> Result<T> {
    Ok(simpo_margin(policy, beta, gamma, prompt, winner, loser)?.delta)
}

/// Analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub worst_rel_error: f64,
    pub worst_abs_error: f64,
    pub entries_checked: usize,
}

/// Denominator floor of the relative error in [`loss_gradient_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares `evaluate`'s gradient with central differences of step `h` on every logit of every
/// prompt the batch touches.
///
/// Records do not interact, so each difference is taken per record and then reduced; differencing
/// the whole batch loss would lose small entries to the rounding of an O(1) total.
pub fn loss_gradient_check<T: Scalar>(
    cfg: &LossConfig<T>,
    policy: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    data: &Dataset<T>,
    h: T,
) -> Result<GradCheckReport> {
    if !(h >= T::lit(1e-7) && h <= T::lit(1e-3)) {
        return Err(FpoError::Config(format!("finite-difference step must lie in [1e-7, 1e-3], got {h}")));
    }
    let analytic = evaluate(cfg, policy, reference, data)?;
    let record_prompts: Vec<usize> = match data {
        Dataset::Pairwise(b) => b.records().iter().map(|r| r.prompt).collect(),
        Dataset::KSample(b) => b.records().iter().map(|r| r.prompt).collect(),
    };
    let mut by_prompt: BTreeMap<usize, Vec<Dataset<T>>> = BTreeMap::new();
    for (i, &x) in record_prompts.iter().enumerate() {
        by_prompt.entry(x).or_default().push(data.select(&[i]));
    }
    let weight = match cfg.reduction {
        Reduction::Mean => 1.0 / data.len() as f64,
        Reduction::Sum => 1.0,
    };
    let nr = policy.num_responses();
    let mut report = GradCheckReport { worst_rel_error: 0.0, worst_abs_error: 0.0, entries_checked: 0 };
    let mut probe = policy.clone();
    for (x, singles) in by_prompt {
        for y in 0..nr {
            let idx = x * nr + y;
            let orig = policy.logits()[idx];
            let mut diff = 0.0;
            for single in &singles {
                probe.logits_mut()[idx] = orig + h;
                let up = evaluate(cfg, &probe, reference, single)?.loss;
                probe.logits_mut()[idx] = orig - h;
                let down = evaluate(cfg, &probe, reference, single)?.loss;
                diff += (up - down).as_f64();
            }
            probe.logits_mut()[idx] = orig;
            let numeric = weight * diff / (h + h).as_f64();
            let a = analytic.gradient[idx].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.worst_abs_error = report.worst_abs_error.max(abs);
            report.worst_rel_error = report.worst_rel_error.max(rel);
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
