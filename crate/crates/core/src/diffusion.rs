//! Conditional diffusion policy.
//!
//! Actions live in a normalized space (`raw / action_scale`). The predictor
//! regresses the injected noise from `(a_t, s, embed(t))`; training weights
//! each dataset pair, which makes the sampler draw from the behavior
//! distribution reweighted by `w(s, a)` without any guidance network.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetStats};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Checkpoint, Trainable};
use crate::rng::RngStream;
use crate::value::{CriticBank, CriticKind, SafetySignal};

pub const DEFAULT_EMBED_DIM: usize = 64;

/// Discrete variance-preserving schedule. Index 0 is the clean action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008` and per-step β capped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        let s = 0.008;
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).min(0.999);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal scale of `a_t = α_t·a + σ_t·z`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Posterior mean coefficients `(c0, ct)` of `q(a_{t-1} | a_t, a_0)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.beta(t);
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }
}

/// Sinusoidal timestep features: `sin(t·f_i)` then `cos(t·f_i)`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            hidden: vec![256, 256, 256],
            embed_dim: DEFAULT_EMBED_DIM,
            batch_size: 2048,
            adam: AdamConfig::default(),
            log_every: 1000,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.hidden.is_empty() {
            return Err(Error::Config(
                "diffusion steps, batch_size, and hidden widths must be nonzero".into(),
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embed_dim must be a positive even number".into()));
        }
        Ok(())
    }
}

/// Feasibility-dependent weight temperatures and clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub alpha_feasible: f64,
    pub alpha_infeasible: f64,
    pub clip_feasible: f64,
    pub clip_infeasible: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            alpha_feasible: 3.0,
            alpha_infeasible: 5.0,
            clip_feasible: 100.0,
            clip_infeasible: 150.0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.alpha_feasible,
            self.alpha_infeasible,
            self.clip_feasible,
            self.clip_infeasible,
        ]
        .iter()
        .all(|x| x.is_finite() && *x > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("weight temperatures and clips must be positive".into()))
        }
    }
}

/// Critic outputs for one `(s, a)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticReadout {
    pub v_h: f64,
    pub q_h: f64,
    pub a_r: f64,
}

impl CriticReadout {
    pub fn a_h(&self) -> f64 {
        self.q_h - self.v_h
    }
}

/// Inside the feasible region: reward-advantage weighting restricted to
/// actions that stay feasible. Outside: prefer actions that lower `Q_h`.
pub fn feasibility_weight(cfg: &WeightConfig, r: &CriticReadout) -> f64 {
    if r.v_h <= 0.0 {
        if r.q_h <= 0.0 {
            (cfg.alpha_feasible * r.a_r).exp().min(cfg.clip_feasible)
        } else {
            0.0
        }
    } else {
        infeasible_weight(cfg, r)
    }
}

/// Safe imitation: uniform over feasible actions, same escape weighting.
pub fn il_weight(cfg: &WeightConfig, r: &CriticReadout) -> f64 {
    if r.v_h <= 0.0 {
        if r.q_h <= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        infeasible_weight(cfg, r)
    }
}

fn infeasible_weight(cfg: &WeightConfig, r: &CriticReadout) -> f64 {
    (-cfg.alpha_infeasible * r.a_h()).exp().min(cfg.clip_infeasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Reward-guided in the feasible region, escape-guided outside it.
    Feasibility,
    /// As `Feasibility`, with zero weight at infeasible states.
    FeasibleOnly,
    /// Safe imitation; needs no reward critics.
    Imitation,
    /// Plain behavior cloning.
    Uniform,
}

/// Weights for every dataset row from frozen critics, with `signal`
/// supplying the safety values.
pub fn dataset_weights(
    bank: &CriticBank,
    data: &Dataset,
    cfg: &WeightConfig,
    mode: WeightMode,
    signal: SafetySignal,
) -> Result<Vec<f64>> {
    if mode == WeightMode::Uniform {
        return Ok(vec![1.0; data.len()]);
    }
    const CHUNK: usize = 4096;
    let mut out = Vec::with_capacity(data.len());
    let (od, ad) = (data.obs_dim, data.act_dim);
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let obs = &data.obs[start * od..end * od];
        let act = &data.act[start * ad..end * ad];
        let v_h = bank.safety_v(signal, obs)?;
        let q_h = bank.safety_q(signal, obs, act)?;
        let a_r = if mode == WeightMode::Imitation {
            vec![0.0; end - start]
        } else {
            let q = bank.q(CriticKind::Reward, obs, act)?;
            let v = bank.v(CriticKind::Reward, obs)?;
            q.iter().zip(&v).map(|(q, v)| q - v).collect()
        };
        for i in 0..end - start {
            let r = CriticReadout {
                v_h: v_h[i],
                q_h: q_h[i],
                a_r: a_r[i],
            };
            out.push(match mode {
                WeightMode::Feasibility => feasibility_weight(cfg, &r),
                WeightMode::FeasibleOnly if r.v_h > 0.0 => 0.0,
                WeightMode::FeasibleOnly => feasibility_weight(cfg, &r),
                WeightMode::Imitation => il_weight(cfg, &r),
                WeightMode::Uniform => unreachable!(),
            });
        }
    }
    if let Some(i) = out.iter().position(|w| !w.is_finite()) {
        return Err(Error::divergence("weights", format!("non-finite weight at row {i}")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    pub curve: Vec<PolicyLoss>,
    pub skipped_batches: usize,
}

/// Shared normalization of observations and actions for policy heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub stats: DatasetStats,
    /// Raw action = normalized action × scale.
    pub action_scale: Vec<f64>,
    /// Symmetric bound on normalized actions.
    pub clip: f64,
}

impl ActionSpace {
    pub fn obs_dim(&self) -> usize {
        self.stats.obs_mean.len()
    }

    pub fn act_dim(&self) -> usize {
        self.action_scale.len()
    }

    fn normalize_action<'a>(&'a self, a: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        a.iter()
            .zip(self.action_scale.iter().cycle())
            .map(|(a, k)| a / k)
    }

    fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_scale.iter().cycle())
            .map(|(a, k)| a.clamp(-self.clip, self.clip) * k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub config: PolicyConfig,
    pub schedule: NoiseSchedule,
    pub space: ActionSpace,
    pub predictor: Trainable,
}

impl DiffusionPolicy {
    pub fn new(config: PolicyConfig, space: ActionSpace, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::cosine(config.steps)?;
        let mut widths = vec![space.act_dim() + space.obs_dim() + config.embed_dim];
        widths.extend(&config.hidden);
        widths.push(space.act_dim());
        let predictor = Trainable::new(&widths, config.adam, rng);
        Ok(Self {
            config,
            schedule,
            space,
            predictor,
        })
    }

    fn input_width(&self) -> usize {
        self.space.act_dim() + self.space.obs_dim() + self.config.embed_dim
    }

    /// Rows `[a_t | s_norm | embed(t)]`.
    fn predictor_input(&self, a_t: &[f64], s_norm: &[f64], ts: &[usize]) -> Vec<f64> {
        let (ad, od) = (self.space.act_dim(), self.space.obs_dim());
        let mut x = Vec::with_capacity(ts.len() * self.input_width());
        for (i, &t) in ts.iter().enumerate() {
            x.extend_from_slice(&a_t[i * ad..(i + 1) * ad]);
            x.extend_from_slice(&s_norm[i * od..(i + 1) * od]);
            x.extend(time_embedding(t, self.config.embed_dim));
        }
        x
    }

    /// Noise prediction for a batch of noisy normalized actions.
    pub fn predict_noise(&self, a_t: &[f64], s_norm: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let x = self.predictor_input(a_t, s_norm, ts);
        self.predictor.net.forward_batch(&x, ts.len())
    }

    /// Weighted noise-regression training over `data`, with one weight per row.
    pub fn train(
        &mut self,
        data: &Dataset,
        weights: &[f64],
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<PolicyTrainReport> {
        check_policy_data(&self.space, data, weights)?;
        let b = self.config.batch_size;
        let ad = self.space.act_dim();
        let t_max = self.schedule.steps();
        let mut report = PolicyTrainReport::default();
        let mut obs = Vec::with_capacity(b * self.space.obs_dim());
        for step in 0..steps {
            obs.clear();
            let mut a_t = Vec::with_capacity(b * ad);
            let mut z = Vec::with_capacity(b * ad);
            let mut ts = Vec::with_capacity(b);
            let mut w = Vec::with_capacity(b);
            for _ in 0..b {
                let i = rng.random_range(0..data.len());
                let t = rng.random_range(1..=t_max);
                let (al, si) = (self.schedule.alpha(t), self.schedule.sigma(t));
                for a in self.space.normalize_action(data.act_row(i)) {
                    let n: f64 = rng.sample(StandardNormal);
                    a_t.push(al * a + si * n);
                    z.push(n);
                }
                obs.extend_from_slice(data.obs_row(i));
                ts.push(t);
                w.push(weights[i]);
            }
            if w.iter().all(|w| *w == 0.0) {
                report.skipped_batches += 1;
                continue;
            }
            self.space.stats.normalize_in_place(&mut obs);
            let x = self.predictor_input(&a_t, &obs, &ts);
            let cache = self.predictor.net.forward_cached(&x, b)?;
            let pred = cache.output();
            let mut loss = 0.0;
            let mut up = vec![0.0; b * ad];
            for i in 0..b {
                for j in 0..ad {
                    let k = i * ad + j;
                    let d = pred[k] - z[k];
                    loss += w[i] * d * d;
                    up[k] = 2.0 * w[i] * d / b as f64;
                }
            }
            loss /= b as f64;
            if !loss.is_finite() {
                return Err(Error::divergence("policy", format!("step {step}: loss={loss}")));
            }
            let (g, _) = self.predictor.net.backward_cached(&cache, &up)?;
            self.predictor.apply(&g)?;
            if self.config.log_every > 0 && ((step + 1) % self.config.log_every == 0 || step + 1 == steps) {
                report.curve.push(PolicyLoss { step: step + 1, loss });
            }
        }
        Ok(report)
    }

    /// Draws one action per observation row (raw units, clipped).
    pub fn sample(&self, obs: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        if self.space.obs_dim() == 0 {
            return Err(Error::InvalidInput(
                "use sample_unconditional for policies without observations".into(),
            ));
        }
        let s_norm = self.space.stats.normalize(obs);
        self.sample_normalized(&s_norm, obs.len() / self.space.obs_dim(), rng)
    }

    /// Draws `n` actions from a policy with no observation input.
    pub fn sample_unconditional(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.sample_normalized(&[], n, rng)
    }

    fn sample_normalized(&self, s_norm: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let x = denoise(&self.schedule, self.space.clip, self.space.act_dim(), n, rng, |a_t, t| {
            self.predict_noise(a_t, s_norm, &vec![t; n])
        })?;
        Ok(self.space.denormalize(&x))
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "schedule": self.schedule,
            "space": self.space,
        });
        let mut ck = Checkpoint::new(step, seed, meta);
        ck.push_trainable("predictor", &self.predictor);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            config: serde_json::from_value(ck.meta["config"].clone())?,
            schedule: serde_json::from_value(ck.meta["schedule"].clone())?,
            space: serde_json::from_value(ck.meta["space"].clone())?,
            predictor: ck.get_trainable("predictor")?,
        })
    }
}

/// Ancestral denoising from `a_T ~ N(0, I)`. `eps` is called exactly once
/// per step, for `t = T, …, 1`. Returns normalized, clipped actions.
pub fn denoise(
    schedule: &NoiseSchedule,
    clip: f64,
    act_dim: usize,
    n: usize,
    rng: &mut RngStream,
    mut eps: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = (0..n * act_dim).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.steps()).rev() {
        let e = eps(&x, t)?;
        let (al, si) = (schedule.alpha(t), schedule.sigma(t));
        let (c0, ct) = schedule.posterior_coefficients(t);
        let noise_scale = schedule.beta(t).sqrt();
        for (xi, ei) in x.iter_mut().zip(&e) {
            let x0 = ((*xi - si * ei) / al).clamp(-clip, clip);
            *xi = if t > 1 {
                let n: f64 = rng.sample(StandardNormal);
                c0 * x0 + ct * *xi + noise_scale * n
            } else {
                x0
            };
        }
    }
    Ok(x)
}

fn check_policy_data(space: &ActionSpace, data: &Dataset, weights: &[f64]) -> Result<()> {
    if data.is_empty() {
        return Err(crate::error::DatasetError::Empty.into());
    }
    if data.obs_dim != space.obs_dim() || data.act_dim != space.act_dim() {
        return Err(Error::Shape("dataset dims do not match the policy".into()));
    }
    if weights.len() != data.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} rows",
            weights.len(),
            data.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Unit-variance Gaussian head `N(μ(s), I)` in normalized action space,
/// trained by weighted log-likelihood. Used by the no-diffusion ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub space: ActionSpace,
    pub batch_size: usize,
    pub log_every: usize,
    pub mean: Trainable,
}

impl GaussianPolicy {
    pub fn new(config: &PolicyConfig, space: ActionSpace, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![space.obs_dim()];
        widths.extend(&config.hidden);
        widths.push(space.act_dim());
        Ok(Self {
            mean: Trainable::new(&widths, config.adam, rng),
            batch_size: config.batch_size,
            log_every: config.log_every,
            space,
        })
    }

    pub fn train(
        &mut self,
        data: &Dataset,
        weights: &[f64],
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<PolicyTrainReport> {
        check_policy_data(&self.space, data, weights)?;
        let b = self.batch_size;
        let ad = self.space.act_dim();
        let mut report = PolicyTrainReport::default();
        for step in 0..steps {
            let mut obs = Vec::with_capacity(b * self.space.obs_dim());
            let mut act = Vec::with_capacity(b * ad);
            let mut w = Vec::with_capacity(b);
            for _ in 0..b {
                let i = rng.random_range(0..data.len());
                obs.extend_from_slice(data.obs_row(i));
                act.extend(self.space.normalize_action(data.act_row(i)));
                w.push(weights[i]);
            }
            if w.iter().all(|w| *w == 0.0) {
                report.skipped_batches += 1;
                continue;
            }
            self.space.stats.normalize_in_place(&mut obs);
            let cache = self.mean.net.forward_cached(&obs, b)?;
            let mu = cache.output();
            let mut loss = 0.0;
            let mut up = vec![0.0; b * ad];
            for i in 0..b {
                for j in 0..ad {
                    let k = i * ad + j;
                    let d = mu[k] - act[k];
                    loss += w[i] * d * d / 2.0;
                    up[k] = w[i] * d / b as f64;
                }
            }
            loss /= b as f64;
            if !loss.is_finite() {
                return Err(Error::divergence("policy", format!("step {step}: loss={loss}")));
            }
            let (g, _) = self.mean.net.backward_cached(&cache, &up)?;
            self.mean.apply(&g)?;
            if self.log_every > 0 && ((step + 1) % self.log_every == 0 || step + 1 == steps) {
                report.curve.push(PolicyLoss { step: step + 1, loss });
            }
        }
        Ok(report)
    }

    pub fn sample(&self, obs: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        let s = self.space.stats.normalize(obs);
        let n = obs.len() / self.space.obs_dim().max(1);
        let mu = self.mean.net.forward_batch(&s, n)?;
        let x: Vec<f64> = mu
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(self.space.denormalize(&x))
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let meta = serde_json::json!({
            "space": self.space,
            "batch_size": self.batch_size,
            "log_every": self.log_every,
        });
        let mut ck = Checkpoint::new(step, seed, meta);
        ck.push_trainable("mean", &self.mean);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            space: serde_json::from_value(ck.meta["space"].clone())?,
            batch_size: serde_json::from_value(ck.meta["batch_size"].clone())?,
            log_every: serde_json::from_value(ck.meta["log_every"].clone())?,
            mean: ck.get_trainable("mean")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;
    use crate::rng::stream;

    #[test]
    fn schedule_identity_and_monotonicity() {
        for steps in [1, 5, 10, 50] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.sigma(0), 0.0);
            for t in 0..=steps {
                let (a, b) = (s.alpha(t), s.sigma(t));
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
                if t > 0 {
                    assert!(s.alpha(t) < s.alpha(t - 1));
                }
            }
            assert!(s.alpha_bar(steps) <= 1e-3 + 1e-12);
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(3, 8);
        assert_eq!(e.len(), 8);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[4] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn weight_examples() {
        let cfg = WeightConfig::default();
        let r = |v_h, q_h, a_r| CriticReadout { v_h, q_h, a_r };
        assert_eq!(feasibility_weight(&cfg, &r(-0.1, -0.2, 0.0)), 1.0);
        assert_eq!(feasibility_weight(&cfg, &r(-0.1, 0.1, 0.0)), 0.0);
        assert_eq!(feasibility_weight(&cfg, &r(-0.1, -0.2, 2.0)), 100.0);
        // Both indicator boundaries are inclusive.
        assert_eq!(feasibility_weight(&cfg, &r(0.0, 0.0, 0.0)), 1.0);
        assert_eq!(il_weight(&cfg, &r(-0.1, -0.5, 0.0)), 1.0);
        assert_eq!(il_weight(&cfg, &r(-0.1, 0.5, 0.0)), 0.0);
        assert_eq!(il_weight(&cfg, &r(0.5, 0.5, 0.0)), 1.0);
        // Infeasible branch: A_h = -1 gives exp(5), below the 150 clip.
        assert!((feasibility_weight(&cfg, &r(0.5, -0.5, 9.0)) - 5f64.exp()).abs() < 1e-12);
        assert_eq!(feasibility_weight(&cfg, &r(0.5, -1.5, 0.0)), 150.0);
    }

    #[test]
    fn forward_marginal_matches_schedule() {
        let s = NoiseSchedule::cosine(5).unwrap();
        let mut rng = stream(11, 0);
        let a = 0.7;
        let n = 200_000;
        for t in 1..=5 {
            let xs: Vec<f64> = (0..n)
                .map(|_| s.alpha(t) * a + s.sigma(t) * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let se = s.sigma(t) / (n as f64).sqrt();
            assert!((mean - s.alpha(t) * a).abs() < 3.0 * se);
            // Std of the sample std is about σ / sqrt(2n).
            assert!((var.sqrt() - s.sigma(t)).abs() < 3.0 * s.sigma(t) / (2.0 * n as f64).sqrt());
        }
    }

    #[test]
    fn denoise_calls_predictor_exactly_t_times() {
        let s = NoiseSchedule::cosine(5).unwrap();
        let mut calls = Vec::new();
        denoise(&s, 1.0, 2, 3, &mut stream(0, 0), |x, t| {
            calls.push(t);
            Ok(vec![0.0; x.len()])
        })
        .unwrap();
        assert_eq!(calls, vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn exact_denoiser_recovers_point_mass() {
        // For a point mass at a*, the optimal noise prediction is exact.
        let s = NoiseSchedule::cosine(5).unwrap();
        let target = 0.4;
        let x = denoise(&s, 1.0, 1, 100, &mut stream(0, 1), |x, t| {
            Ok(x.iter().map(|xi| (xi - s.alpha(t) * target) / s.sigma(t)).collect())
        })
        .unwrap();
        assert!(x.iter().all(|v| (v - target).abs() < 1e-9));
    }

    fn point_mass_data(a: [f64; 2]) -> Dataset {
        let mut d = Dataset::new(1, 2, "t");
        for i in 0..256 {
            let s = vec![i as f64 / 256.0];
            d.push(Transition {
                s: s.clone(),
                a: a.to_vec(),
                s_next: s,
                r: 0.0,
                c: 0.0,
                h: -1.0,
                done: false,
            });
        }
        d
    }

    fn small_policy(seed: u64) -> DiffusionPolicy {
        let cfg = PolicyConfig {
            hidden: vec![32, 32],
            embed_dim: 8,
            batch_size: 128,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            log_every: 0,
            ..Default::default()
        };
        let space = ActionSpace {
            stats: DatasetStats::identity(1),
            action_scale: vec![1.0, 2.0],
            clip: 1.0,
        };
        DiffusionPolicy::new(cfg, space, &mut stream(seed, 0)).unwrap()
    }

    #[test]
    fn zero_weights_skip_every_batch() {
        let mut p = small_policy(1);
        let before = p.predictor.clone();
        let d = point_mass_data([0.1, 0.2]);
        let rep = p.train(&d, &vec![0.0; d.len()], 7, &mut stream(1, 1)).unwrap();
        assert_eq!(rep.skipped_batches, 7);
        assert_eq!(p.predictor, before);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let p = small_policy(2);
        let obs = [0.3, 0.7];
        let a = p.sample(&obs, &mut stream(5, 5)).unwrap();
        let b = p.sample(&obs, &mut stream(5, 5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().step_by(2).all(|x| x.abs() <= 1.0));
        assert!(a.iter().skip(1).step_by(2).all(|x| x.abs() <= 2.0));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let mut p = small_policy(3);
        let d = point_mass_data([0.0, 0.0]);
        assert!(p.train(&d, &[1.0], 1, &mut stream(0, 0)).is_err());
        assert!(p.train(&d, &vec![-1.0; d.len()], 1, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let p = small_policy(4);
        let back = DiffusionPolicy::from_checkpoint(&p.to_checkpoint(0, 4)).unwrap();
        assert_eq!(back, p);
    }
}
