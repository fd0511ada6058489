//! Deterministic first-order training of tabular policy logits.
//!
//! Updates are full-batch unless a minibatch size is configured, in which case records are
//! visited in epochs shuffled by a seeded generator. Either way a run is a pure function of its
//! inputs, so two runs with the same arguments produce bit-identical reports.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FpoError, Result};
use crate::losses::{evaluate, Dataset, LossConfig};
use crate::policy::{mean_tv_hatted, RewardTable, TabularPolicy};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GradientDescent,
    AdamLike,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig<T: Scalar> {
    pub algorithm: Algorithm,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps_adam: T,
    pub max_steps: usize,
    /// Stop once the gradient ∞-norm falls below this.
    pub tolerance: T,
    /// Seeds minibatch shuffling; unused for full-batch runs.
    pub seed: u64,
    /// Trajectories are sampled every this many steps (and at the last step).
    pub log_interval: usize,
    pub minibatch: Option<usize>,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn gradient_descent(learning_rate: T, max_steps: usize) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::GradientDescent,
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps_adam: T::lit(1e-8),
            max_steps,
            tolerance: T::lit(1e-8),
            seed: 0,
            log_interval: 1,
            minibatch: None,
        }
    }

    pub fn adam(learning_rate: T, max_steps: usize) -> Self {
        OptimizerConfig { algorithm: Algorithm::AdamLike, ..Self::gradient_descent(learning_rate, max_steps) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > T::zero()) {
            return Err(FpoError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= T::zero() && b < T::one()) {
                return Err(FpoError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps_adam.is_nan()
            || self.eps_adam <= T::zero()
            || self.tolerance.is_nan()
            || self.tolerance <= T::zero()
        {
            return Err(FpoError::Config("eps_adam and tolerance must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(FpoError::Config("log interval must be at least 1".into()));
        }
        if self.minibatch == Some(0) {
            return Err(FpoError::Config("minibatch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for OptimizerConfig<T> {
    fn default() -> Self {
        Self::gradient_descent(T::lit(0.1), 1000)
    }
}

/// Moment estimates of the Adam-style optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dim: usize) -> Self {
        AdamState { m: vec![T::zero(); dim], v: vec![T::zero(); dim], t: 0 }
    }
}

/// `θ ← θ − lr·∇`.
pub fn gd_step<T: Scalar>(params: &mut [T], gradient: &[T], learning_rate: T) -> Result<()> {
    check_dims(params.len(), gradient.len())?;
    for (p, &g) in params.iter_mut().zip(gradient) {
        *p = *p - learning_rate * g;
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [T],
    gradient: &[T],
    opt: &OptimizerConfig<T>,
) -> Result<()> {
    check_dims(params.len(), gradient.len())?;
    check_dims(state.m.len(), gradient.len())?;
    state.t += 1;
    let t = state.t as i32;
    let one = T::one();
    let c1 = one - opt.beta1.powi(t);
    let c2 = one - opt.beta2.powi(t);
    for i in 0..params.len() {
        let g = gradient[i];
        state.m[i] = opt.beta1 * state.m[i] + (one - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (one - opt.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] - opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps_adam);
    }
    Ok(())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FpoError::Shape(format!("state has {a} entries, gradient has {b}")));
    }
    Ok(())
}

/// Trajectories of one training run, sampled at `logged_steps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport<T: Scalar> {
    /// Number of updates applied.
    pub steps_taken: usize,
    pub logged_steps: Vec<usize>,
    pub loss_trajectory: Vec<T>,
    /// Gradient ∞-norms.
    pub grad_norm_trajectory: Vec<T>,
    /// Mean `TV(π̂_θ, π̂*)`; empty when no reward table was given.
    pub tv_to_optimal_trajectory: Vec<T>,
    pub final_policy: TabularPolicy<T>,
}

impl<T: Scalar> TrainReport<T> {
    pub fn final_loss(&self) -> T {
        *self.loss_trajectory.last().expect("at least one logged step")
    }

    pub fn final_grad_norm(&self) -> T {
        *self.grad_norm_trajectory.last().expect("at least one logged step")
    }

    pub fn final_tv(&self) -> Option<T> {
        self.tv_to_optimal_trajectory.last().copied()
    }

    /// Rows `step,loss,grad_norm,tv_to_optimal`; the last column is empty without a reward.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm", "tv_to_optimal"])?;
        for (i, step) in self.logged_steps.iter().enumerate() {
            let tv = self.tv_to_optimal_trajectory.get(i).map(|v| format!("{:.16e}", v.as_f64()));
            w.write_record([
                step.to_string(),
                format!("{:.16e}", self.loss_trajectory[i].as_f64()),
                format!("{:.16e}", self.grad_norm_trajectory[i].as_f64()),
                tv.unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Minimizes `cfg`'s loss on `data` over the logits of `init`.
///
/// With `reward` given, the mean `TV(π̂_θ, π̂*)` (at `cfg.beta`) is logged alongside the loss.
/// A non-finite loss, gradient or parameter is reported as [`FpoError::Divergence`].
pub fn train<T: Scalar>(
    opt: &OptimizerConfig<T>,
    cfg: &LossConfig<T>,
    init: &TabularPolicy<T>,
    reference: &TabularPolicy<T>,
    reward: Option<&RewardTable<T>>,
    data: &Dataset<T>,
) -> Result<TrainReport<T>> {
    opt.validate()?;
    cfg.validate()?;
    init.check_same_shape(reference)?;
    if let Some(r) = reward {
        if r.shape() != reference.shape() {
            return Err(FpoError::Shape("reward table does not match the policy".into()));
        }
    }
    if data.is_empty() {
        return Err(FpoError::Config("empty dataset".into()));
    }

    let mut batches = Batches::new(opt, data.len());
    let mut policy = init.clone();
    let mut adam = AdamState::new(policy.logits().len());
    let mut report = TrainReport {
        steps_taken: 0,
        logged_steps: Vec::new(),
        loss_trajectory: Vec::new(),
        grad_norm_trajectory: Vec::new(),
        tv_to_optimal_trajectory: Vec::new(),
        final_policy: init.clone(),
    };

    for step in 0..=opt.max_steps {
        let value = match batches.next() {
            None => evaluate(cfg, &policy, reference, data),
            Some(idx) => evaluate(cfg, &policy, reference, &data.select(&idx)),
        }
        .map_err(|e| diverged(step, e))?;
        if !value.loss.is_finite() {
            return Err(FpoError::Divergence { step, reason: format!("loss is {}", value.loss) });
        }
        let grad_norm = value.grad_inf_norm();
        if !grad_norm.is_finite() {
            return Err(FpoError::Divergence { step, reason: "gradient is not finite".into() });
        }
        let done = grad_norm < opt.tolerance || step == opt.max_steps;
        if done || step % opt.log_interval == 0 {
            report.logged_steps.push(step);
            report.loss_trajectory.push(value.loss);
            report.grad_norm_trajectory.push(grad_norm);
            if let Some(r) = reward {
                let tv = mean_tv_hatted(&policy, reference, r, cfg.beta).map_err(|e| diverged(step, e))?;
                report.tv_to_optimal_trajectory.push(tv);
            }
        }
        if done {
            report.steps_taken = step;
            break;
        }
        let params = policy.logits_mut();
        match opt.algorithm {
            Algorithm::GradientDescent => gd_step(params, &value.gradient, opt.learning_rate)?,
            Algorithm::AdamLike => adam_step(&mut adam, params, &value.gradient, opt)?,
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FpoError::Divergence { step: step + 1, reason: "logits overflowed".into() });
        }
    }
    report.final_policy = policy;
    Ok(report)
}

fn diverged(step: usize, e: FpoError) -> FpoError {
    match e {
        FpoError::NonFinite(reason) | FpoError::Domain(reason) => FpoError::Divergence { step, reason },
        other => other,
    }
}

// Seeded epoch shuffling; yields None for full-batch runs.
struct Batches {
    size: Option<usize>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Batches {
    fn new<T: Scalar>(opt: &OptimizerConfig<T>, n: usize) -> Self {
        let size = opt.minibatch.filter(|&b| b < n);
        Batches { size, rng: ChaCha8Rng::seed_from_u64(opt.seed), order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        let size = self.size?;
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::Generator;
    use crate::losses::{KSampleBatch, KSampleRecord, PairwiseBatch};
    use crate::policy::{mean_tv_optimal, optimal_policy_table};
    use rand::Rng;

    type G = Generator<f64>;

    fn task(seed: u64) -> (TabularPolicy<f64>, RewardTable<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference =
            TabularPolicy::from_flat(4, 8, (0..32).map(|_| rng.random_range(-1.5..1.5)).collect(), vec![1; 32])
                .unwrap();
        let reward = RewardTable::from_flat(4, 8, (0..32).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        (reference, reward)
    }

    fn full_support(reward: &RewardTable<f64>) -> Dataset<f64> {
        let (np, nr) = reward.shape();
        Dataset::KSample(
            KSampleBatch::new(
                (0..np)
                    .map(|x| KSampleRecord {
                        prompt: x,
                        responses: (0..nr).collect(),
                        rewards: reward.row(x).unwrap().to_vec(),
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn gd_step_example() {
        let mut p = [0.0];
        gd_step(&mut p, &[1.0], 0.1).unwrap();
        assert_eq!(p, [-0.1]);
        assert!(gd_step(&mut p, &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let opt = OptimizerConfig::adam(0.05, 10);
        let mut s = AdamState::new(3);
        let mut p = [0.0f64, 1.0, -2.0];
        adam_step(&mut s, &mut p, &[1.0, -3.0, 1e-3], &opt).unwrap();
        assert!((p[0] + 0.05).abs() < 1e-8);
        assert!((p[1] - 1.05).abs() < 1e-8);
        assert!((p[2] + 2.05).abs() < 1e-5);
        let mut z = AdamState::new(2);
        let mut q = [0.3, 0.4];
        adam_step(&mut z, &mut q, &[0.0, 0.0], &opt).unwrap();
        assert_eq!(q, [0.3, 0.4]);
        assert_eq!(z, AdamState { m: vec![0.0; 2], v: vec![0.0; 2], t: 1 });
    }

    #[test]
    fn starts_at_fixed_point() {
        let (reference, reward) = task(1);
        let beta = 0.5;
        let optimum = optimal_policy_table(&reference, &reward, beta).unwrap();
        let cfg = LossConfig::general(G::alpha(0.5).unwrap(), beta);
        let rep =
            train(&OptimizerConfig::adam(0.05, 100), &cfg, &optimum, &reference, Some(&reward), &full_support(&reward))
                .unwrap();
        assert_eq!(rep.steps_taken, 0);
        assert!(rep.loss_trajectory[0] < 1e-10);
        assert_eq!(rep.final_policy, optimum);
    }

    #[test]
    fn converges_to_optimum_for_every_generator() {
        let (reference, reward) = task(2);
        let beta = 0.5;
        let data = full_support(&reward);
        let init = TabularPolicy::uniform(4, 8).unwrap();
        for g in G::named_catalog() {
            let cfg = LossConfig::general(g.clone(), beta);
            let mut opt = OptimizerConfig::adam(0.05, 5000);
            opt.log_interval = 100;
            let rep = train(&opt, &cfg, &init, &reference, Some(&reward), &data).unwrap();
            let tv = rep.final_tv().unwrap();
            assert!(tv < 1e-3, "{g}: {tv}");
            assert!(mean_tv_optimal(&rep.final_policy, &reference, &reward, beta).unwrap() < 1e-2, "{g}");
            assert!(rep.tv_to_optimal_trajectory.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_steps_descend() {
        let (reference, reward) = task(3);
        let init = TabularPolicy::uniform(4, 8).unwrap();
        let pairs: Vec<_> = (0..16).map(|i| (i % 4, i % 8, (i + 5) % 8)).collect();
        let plain = Dataset::Pairwise(PairwiseBatch::from_triples(&pairs).unwrap());
        for g in G::named_catalog() {
            let cases = [
                (LossConfig::general(g.clone(), 0.5), full_support(&reward)),
                (LossConfig::pairwise_smoothed(g.clone(), 0.5, 1e-3), plain.clone()),
            ];
            for (cfg, data) in cases {
                let rep =
                    train(&OptimizerConfig::gradient_descent(1e-3, 100), &cfg, &init, &reference, None, &data).unwrap();
                assert_eq!(rep.loss_trajectory.len(), 101);
                for w in rep.loss_trajectory.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "{g}");
                }
            }
        }
    }

    #[test]
    fn huge_learning_rate_never_reports_nan() {
        let (reference, reward) = task(4);
        let init = TabularPolicy::uniform(4, 8).unwrap();
        for g in G::named_catalog() {
            let cfg = LossConfig::general(g.clone(), 0.5);
            match train(
                &OptimizerConfig::gradient_descent(1e3, 200),
                &cfg,
                &init,
                &reference,
                Some(&reward),
                &full_support(&reward),
            ) {
                Ok(rep) => {
                    assert!(rep.loss_trajectory.iter().chain(&rep.grad_norm_trajectory).all(|v| v.is_finite()));
                    assert!(rep.final_policy.logits().iter().all(|v| v.is_finite()));
                }
                Err(e) => assert!(matches!(e, FpoError::Divergence { .. }), "{g}: {e}"),
            }
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let (reference, reward) = task(5);
        let init = TabularPolicy::uniform(4, 8).unwrap();
        let cfg = LossConfig::general(G::JensenShannon, 0.5);
        let data = full_support(&reward);
        let mut opt = OptimizerConfig::adam(0.05, 300);
        opt.minibatch = Some(2);
        opt.seed = 11;
        let a = train(&opt, &cfg, &init, &reference, Some(&reward), &data).unwrap();
        let b = train(&opt, &cfg, &init, &reference, Some(&reward), &data).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().starts_with("step,loss,grad_norm,tv_to_optimal\n0,"));
    }

    #[test]
    fn rejects_bad_configs() {
        let (reference, _) = task(6);
        let init = TabularPolicy::uniform(4, 8).unwrap();
        let cfg = LossConfig::pairwise_smoothed(G::ReverseKl, 0.5, 0.1);
        let data = Dataset::Pairwise(PairwiseBatch::from_triples(&[(0, 0, 1)]).unwrap());
        let mut opt = OptimizerConfig::gradient_descent(0.1, 10);
        opt.beta1 = 1.0;
        assert!(matches!(train(&opt, &cfg, &init, &reference, None, &data), Err(FpoError::Config(_))));
        let opt = OptimizerConfig::gradient_descent(-0.1, 10);
        assert!(matches!(train(&opt, &cfg, &init, &reference, None, &data), Err(FpoError::Config(_))));
        let small = TabularPolicy::uniform(2, 8).unwrap();
        assert!(train(&OptimizerConfig::default(), &cfg, &small, &reference, None, &data).is_err());
    }
}
