//! Offline critics.
//!
//! * Feasible values `Q_h`, `V_h`: the discounted reachability backup
//!   `(1-γ)h(s) + γ·max{h(s), V_h(s')}`, with `V_h` a *lower* expectile of
//!   `Q_h` over dataset actions (reversed expectile loss) standing in for the
//!   in-support minimum.
//! * Reward values `Q_r`, `V_r`: implicit Q-learning with an upper expectile.
//! * Cost values `Q_c`, `V_c`: discounted cost sum with a lower expectile,
//!   used by the ablation that replaces reachability with cost values.
//!
//! Each critic family keeps two Q networks with soft-updated targets. Reward
//! critics reduce the pair with `min`, feasible and cost critics with `max`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetStats};
use crate::error::{Error, Result};
use crate::nn::{soft_update, AdamConfig, Checkpoint, Mlp, Trainable};
use crate::rng::RngStream;

/// `|τ − 𝕀(u < 0)|·u²`: penalizes positive residuals more, so the fitted
/// value tracks an upper expectile.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// `|τ − 𝕀(u > 0)|·u²`: the mirror image, tracking a lower expectile.
pub fn reversed_expectile_loss(u: f64, tau: f64) -> f64 {
    reversed_expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

fn reversed_expectile_weight(u: f64, tau: f64) -> f64 {
    if u > 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectileSide {
    Upper,
    Lower,
}

impl ExpectileSide {
    pub fn loss(self, u: f64, tau: f64) -> f64 {
        match self {
            ExpectileSide::Upper => expectile_loss(u, tau),
            ExpectileSide::Lower => reversed_expectile_loss(u, tau),
        }
    }

    /// d loss / d u.
    pub fn grad(self, u: f64, tau: f64) -> f64 {
        let w = match self {
            ExpectileSide::Upper => expectile_weight(u, tau),
            ExpectileSide::Lower => reversed_expectile_weight(u, tau),
        };
        2.0 * w * u
    }
}

/// Fits a single scalar `V` to `samples` by minimizing the mean expectile
/// loss of `x − V` with Adam, the same loss gradient the value networks use.
/// The learning rate is annealed so the result settles to well below 1e-3.
pub fn fit_scalar_expectile(samples: &[f64], tau: f64, side: ExpectileSide, steps: usize) -> f64 {
    let mut value = Trainable {
        net: Mlp::zeros(&[1, 1]),
        opt: crate::nn::AdamState::new(
            &Mlp::zeros(&[1, 1]),
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        ),
    };
    let zeros = vec![0.0; samples.len()];
    let n = samples.len() as f64;
    for i in 0..steps {
        value.opt.config.lr = 0.05 * (1.0 - i as f64 / steps as f64) + 1e-5;
        let cache = value.net.forward_cached(&zeros, samples.len()).expect("1-wide input");
        let up: Vec<f64> = samples
            .iter()
            .zip(cache.output())
            .map(|(x, v)| -side.grad(x - v, tau) / n)
            .collect();
        let (g, _) = value.net.backward_cached(&cache, &up).expect("shapes agree");
        value.apply(&g).expect("finite gradient");
    }
    value.net.layers[0].bias[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    /// Soft target mixing rate.
    pub target_mix: f64,
    /// Multiplier on rewards in the reward backup.
    #[serde(default = "unit_scale")]
    pub reward_scale: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            gamma: 0.99,
            tau: 0.9,
            target_mix: 0.001,
            reward_scale: 1.0,
            batch_size: 256,
            adam: AdamConfig::default(),
            log_every: 1000,
        }
    }
}

fn unit_scale() -> f64 {
    1.0
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0.5, 1), got {}", self.tau)));
        }
        if !(self.target_mix >= 0.0 && self.target_mix <= 1.0) {
            return Err(Error::Config("target_mix must be in [0, 1]".into()));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::Config("reward_scale must be positive".into()));
        }
        if self.batch_size == 0 || self.hidden.is_empty() {
            return Err(Error::Config("batch_size and hidden widths must be nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Feasible,
    Reward,
    Cost,
}

impl CriticKind {
    pub fn name(self) -> &'static str {
        match self {
            CriticKind::Feasible => "feasible",
            CriticKind::Reward => "reward",
            CriticKind::Cost => "cost",
        }
    }

    fn side(self) -> ExpectileSide {
        match self {
            CriticKind::Reward => ExpectileSide::Upper,
            CriticKind::Feasible | CriticKind::Cost => ExpectileSide::Lower,
        }
    }

    /// Reduction over the critic pair: pessimistic for each signal.
    fn reduce(self, a: f64, b: f64) -> f64 {
        match self {
            CriticKind::Reward => a.min(b),
            CriticKind::Feasible | CriticKind::Cost => a.max(b),
        }
    }
}

/// Which critic family decides safety, and the level at or below which a
/// value counts as safe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetySignal {
    pub kind: CriticKind,
    pub threshold: f64,
}

impl SafetySignal {
    pub const FEASIBLE: SafetySignal = SafetySignal {
        kind: CriticKind::Feasible,
        threshold: 0.0,
    };
    pub const COST: SafetySignal = SafetySignal {
        kind: CriticKind::Cost,
        threshold: 1e-3,
    };
}

/// Two Q networks with targets and one state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSet {
    pub kind: CriticKind,
    pub q: [Trainable; 2],
    pub q_target: [Mlp; 2],
    pub v: Trainable,
}

impl CriticSet {
    pub fn new(kind: CriticKind, obs_dim: usize, act_dim: usize, cfg: &CriticConfig, rng: &mut RngStream) -> Self {
        let widths = |input: usize| {
            let mut w = vec![input];
            w.extend(&cfg.hidden);
            w.push(1);
            w
        };
        let q = [
            Trainable::new(&widths(obs_dim + act_dim), cfg.adam, rng),
            Trainable::new(&widths(obs_dim + act_dim), cfg.adam, rng),
        ];
        let q_target = [q[0].net.clone(), q[1].net.clone()];
        let v = Trainable::new(&widths(obs_dim), cfg.adam, rng);
        Self { kind, q, q_target, v }
    }

    /// Pair-reduced target Q for a batch of normalized `(s, a)` rows.
    pub fn q_value(&self, sa: &[f64], batch: usize) -> Result<Vec<f64>> {
        let q1 = self.q_target[0].forward_batch(sa, batch)?;
        let q2 = self.q_target[1].forward_batch(sa, batch)?;
        Ok(q1.iter().zip(&q2).map(|(a, b)| self.kind.reduce(*a, *b)).collect())
    }

    pub fn v_value(&self, s: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.v.net.forward_batch(s, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub loss_v: f64,
    pub loss_q: f64,
    pub mean_v: f64,
}

/// Normalized minibatch views shared by every critic update.
struct Batch {
    size: usize,
    s: Vec<f64>,
    s_next: Vec<f64>,
    sa: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    done: Vec<bool>,
}

/// Observation normalization and action scaling applied in front of every
/// critic, plus the critic families themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBank {
    pub config: CriticConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub stats: DatasetStats,
    pub action_scale: Vec<f64>,
    pub feasible: Option<CriticSet>,
    pub reward: Option<CriticSet>,
    pub cost: Option<CriticSet>,
}

impl CriticBank {
    pub fn new(config: CriticConfig, stats: DatasetStats, action_scale: Vec<f64>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            obs_dim: stats.obs_mean.len(),
            act_dim: action_scale.len(),
            config,
            stats,
            action_scale,
            feasible: None,
            reward: None,
            cost: None,
        })
    }

    pub fn set(&self, kind: CriticKind) -> Option<&CriticSet> {
        match kind {
            CriticKind::Feasible => self.feasible.as_ref(),
            CriticKind::Reward => self.reward.as_ref(),
            CriticKind::Cost => self.cost.as_ref(),
        }
    }

    fn set_mut(&mut self, kind: CriticKind) -> &mut Option<CriticSet> {
        match kind {
            CriticKind::Feasible => &mut self.feasible,
            CriticKind::Reward => &mut self.reward,
            CriticKind::Cost => &mut self.cost,
        }
    }

    fn require(&self, kind: CriticKind) -> Result<&CriticSet> {
        self.set(kind)
            .ok_or_else(|| Error::Config(format!("{} critics have not been trained", kind.name())))
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        let mut out = obs.to_vec();
        self.stats.normalize_in_place(&mut out);
        out
    }

    /// Row-major `[normalized s | scaled a]` rows.
    pub fn state_action_rows(&self, obs: &[f64], act: &[f64]) -> Vec<f64> {
        let n = obs.len() / self.obs_dim;
        let s = self.normalize_obs(obs);
        let mut out = Vec::with_capacity(n * (self.obs_dim + self.act_dim));
        for i in 0..n {
            out.extend_from_slice(&s[i * self.obs_dim..(i + 1) * self.obs_dim]);
            out.extend(
                act[i * self.act_dim..(i + 1) * self.act_dim]
                    .iter()
                    .zip(&self.action_scale)
                    .map(|(a, k)| a / k),
            );
        }
        out
    }

    /// Pair-reduced `Q(s, a)` for raw observations and actions.
    pub fn q(&self, kind: CriticKind, obs: &[f64], act: &[f64]) -> Result<Vec<f64>> {
        let n = obs.len() / self.obs_dim;
        self.require(kind)?.q_value(&self.state_action_rows(obs, act), n)
    }

    pub fn v(&self, kind: CriticKind, obs: &[f64]) -> Result<Vec<f64>> {
        let n = obs.len() / self.obs_dim;
        self.require(kind)?.v_value(&self.normalize_obs(obs), n)
    }

    /// Safety `V` shifted so that `≤ 0` means safe.
    pub fn safety_v(&self, signal: SafetySignal, obs: &[f64]) -> Result<Vec<f64>> {
        let mut v = self.v(signal.kind, obs)?;
        v.iter_mut().for_each(|x| *x -= signal.threshold);
        Ok(v)
    }

    /// Safety `Q` shifted so that `≤ 0` means safe.
    pub fn safety_q(&self, signal: SafetySignal, obs: &[f64], act: &[f64]) -> Result<Vec<f64>> {
        let mut q = self.q(signal.kind, obs, act)?;
        q.iter_mut().for_each(|x| *x -= signal.threshold);
        Ok(q)
    }

    /// `(A_r, A_h)` per row: `min-pair Q_r − V_r` and `max-pair Q_h − V_h`.
    pub fn advantages(&self, obs: &[f64], act: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let qr = self.q(CriticKind::Reward, obs, act)?;
        let vr = self.v(CriticKind::Reward, obs)?;
        let qh = self.q(CriticKind::Feasible, obs, act)?;
        let vh = self.v(CriticKind::Feasible, obs)?;
        Ok((
            qr.iter().zip(&vr).map(|(q, v)| q - v).collect(),
            qh.iter().zip(&vh).map(|(q, v)| q - v).collect(),
        ))
    }

    fn sample_batch(&self, data: &Dataset, rng: &mut RngStream) -> Batch {
        let size = self.config.batch_size;
        let mut obs = Vec::with_capacity(size * self.obs_dim);
        let mut next = Vec::with_capacity(size * self.obs_dim);
        let mut act = Vec::with_capacity(size * self.act_dim);
        let (mut r, mut c, mut h, mut done) = (
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
            Vec::with_capacity(size),
        );
        for _ in 0..size {
            let i = rng.random_range(0..data.len());
            obs.extend_from_slice(data.obs_row(i));
            next.extend_from_slice(data.next_obs_row(i));
            act.extend_from_slice(data.act_row(i));
            r.push(data.reward[i]);
            c.push(data.cost[i]);
            h.push(data.h[i]);
            done.push(data.done[i]);
        }
        Batch {
            size,
            sa: self.state_action_rows(&obs, &act),
            s: self.normalize_obs(&obs),
            s_next: self.normalize_obs(&next),
            r,
            c,
            h,
            done,
        }
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(crate::error::DatasetError::Empty.into());
        }
        if data.obs_dim != self.obs_dim || data.act_dim != self.act_dim {
            return Err(Error::Shape(format!(
                "dataset dims ({}, {}) do not match critic dims ({}, {})",
                data.obs_dim, data.act_dim, self.obs_dim, self.act_dim
            )));
        }
        Ok(())
    }

    /// Trains one critic family for `steps` minibatch updates, creating it on
    /// first use. Each step fits V on the batch, then both Q networks, then
    /// soft-updates the targets.
    pub fn train(
        &mut self,
        kind: CriticKind,
        data: &Dataset,
        steps: usize,
        init_rng: &mut RngStream,
        rng: &mut RngStream,
    ) -> Result<Vec<StepLosses>> {
        self.check_dataset(data)?;
        if self.set(kind).is_none() {
            let fresh = CriticSet::new(kind, self.obs_dim, self.act_dim, &self.config, init_rng);
            *self.set_mut(kind) = Some(fresh);
        }
        let cfg = self.config.clone();
        // Fixed probe rows for the mean-V monitor.
        let probe_n = data.len().min(2048);
        let probe = self.normalize_obs(&data.obs[..probe_n * self.obs_dim]);

        let mut curve = Vec::new();
        let mut set = self.set_mut(kind).take().expect("created above");
        let result = (|| {
            for step in 0..steps {
                let batch = self.sample_batch(data, rng);
                let (loss_v, loss_q) = update(&mut set, &batch, &cfg)?;
                if !(loss_v.is_finite() && loss_q.is_finite()) {
                    return Err(Error::divergence(
                        kind.name(),
                        format!("step {step}: loss_v={loss_v}, loss_q={loss_q}"),
                    ));
                }
                let last = step + 1 == steps;
                if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || last) {
                    let v = set.v.net.forward_batch(&probe, probe_n)?;
                    curve.push(StepLosses {
                        step: step + 1,
                        loss_v,
                        loss_q,
                        mean_v: v.iter().sum::<f64>() / probe_n as f64,
                    });
                }
            }
            Ok(())
        })();
        *self.set_mut(kind) = Some(set);
        result.map(|_| curve)
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "config": self.config,
            "stats": self.stats,
            "action_scale": self.action_scale,
        });
        let mut ck = Checkpoint::new(step, seed, meta);
        for kind in [CriticKind::Feasible, CriticKind::Reward, CriticKind::Cost] {
            if let Some(set) = self.set(kind) {
                let p = kind.name();
                ck.push_trainable(&format!("{p}.q1"), &set.q[0]);
                ck.push_trainable(&format!("{p}.q2"), &set.q[1]);
                ck.push(&format!("{p}.q1_target"), &set.q_target[0], None);
                ck.push(&format!("{p}.q2_target"), &set.q_target[1], None);
                ck.push_trainable(&format!("{p}.v"), &set.v);
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let config: CriticConfig = serde_json::from_value(meta["config"].clone())?;
        let stats: DatasetStats = serde_json::from_value(meta["stats"].clone())?;
        let action_scale: Vec<f64> = serde_json::from_value(meta["action_scale"].clone())?;
        let mut bank = CriticBank::new(config, stats, action_scale)?;
        for kind in [CriticKind::Feasible, CriticKind::Reward, CriticKind::Cost] {
            let p = kind.name();
            if ck.get(&format!("{p}.v")).is_err() {
                continue;
            }
            let set = CriticSet {
                kind,
                q: [
                    ck.get_trainable(&format!("{p}.q1"))?,
                    ck.get_trainable(&format!("{p}.q2"))?,
                ],
                q_target: [
                    ck.get(&format!("{p}.q1_target"))?.clone(),
                    ck.get(&format!("{p}.q2_target"))?.clone(),
                ],
                v: ck.get_trainable(&format!("{p}.v"))?,
            };
            *bank.set_mut(kind) = Some(set);
        }
        Ok(bank)
    }

    /// Order-sensitive checksum over every parameter in the bank.
    pub fn checksum(&self) -> u64 {
        let mut h = 0u64;
        for kind in [CriticKind::Feasible, CriticKind::Reward, CriticKind::Cost] {
            if let Some(set) = self.set(kind) {
                for net in [&set.q[0].net, &set.q[1].net, &set.q_target[0], &set.q_target[1], &set.v.net] {
                    h = h.rotate_left(7) ^ net.checksum();
                }
            }
        }
        h
    }
}

/// Backup target for one row, given the bootstrapped next-state value.
fn backup(kind: CriticKind, b: &Batch, i: usize, v_next: f64, cfg: &CriticConfig) -> f64 {
    let gamma = cfg.gamma;
    match kind {
        CriticKind::Feasible => {
            let h = b.h[i];
            // Terminal rows carry no successor label; the worst violation so
            // far is the violation of the current state.
            let tail = if b.done[i] { h } else { h.max(v_next) };
            (1.0 - gamma) * h + gamma * tail
        }
        CriticKind::Reward => cfg.reward_scale * b.r[i] + if b.done[i] { 0.0 } else { gamma * v_next },
        CriticKind::Cost => b.c[i] + if b.done[i] { 0.0 } else { gamma * v_next },
    }
}

fn update(set: &mut CriticSet, b: &Batch, cfg: &CriticConfig) -> Result<(f64, f64)> {
    let n = b.size as f64;
    let kind = set.kind;
    let side = kind.side();

    // V step against the pair-reduced target critics.
    let q_t = set.q_value(&b.sa, b.size)?;
    let v_cache = set.v.net.forward_cached(&b.s, b.size)?;
    let mut loss_v = 0.0;
    let up: Vec<f64> = q_t
        .iter()
        .zip(v_cache.output())
        .map(|(q, v)| {
            let u = q - v;
            loss_v += side.loss(u, cfg.tau);
            -side.grad(u, cfg.tau) / n
        })
        .collect();
    let (g, _) = set.v.net.backward_cached(&v_cache, &up)?;
    set.v.apply(&g)?;

    // Q step against the freshly updated V.
    let v_next = set.v.net.forward_batch(&b.s_next, b.size)?;
    let y: Vec<f64> = (0..b.size)
        .map(|i| backup(kind, b, i, v_next[i], cfg))
        .collect();
    let mut loss_q = 0.0;
    for q in set.q.iter_mut() {
        let cache = q.net.forward_cached(&b.sa, b.size)?;
        let up: Vec<f64> = y
            .iter()
            .zip(cache.output())
            .map(|(y, q)| {
                loss_q += (y - q) * (y - q) / 2.0;
                -2.0 * (y - q) / n
            })
            .collect();
        let (g, _) = q.net.backward_cached(&cache, &up)?;
        q.apply(&g)?;
    }
    for (t, q) in set.q_target.iter_mut().zip(&set.q) {
        soft_update(t, &q.net, cfg.target_mix)?;
    }
    Ok((loss_v / n, loss_q / n))
}

pub mod tabular {
    //! Exact dynamic programming on small deterministic MDPs.

    /// Deterministic finite MDP: `next[s][a]` is the successor state.
    #[derive(Debug, Clone, PartialEq)]
    pub struct TabularMdp {
        pub next: Vec<Vec<usize>>,
        pub h: Vec<f64>,
    }

    impl TabularMdp {
        pub fn n_states(&self) -> usize {
            self.h.len()
        }

        pub fn n_actions(&self) -> usize {
            self.next.first().map_or(0, |a| a.len())
        }

        /// One application of the feasible Bellman operator
        /// `Q(s,a) ← (1-γ)h(s) + γ·max{h(s), min_a' Q(s', a')}`.
        pub fn feasible_backup(&self, q: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
            let v: Vec<f64> = q
                .iter()
                .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                .collect();
            self.next
                .iter()
                .enumerate()
                .map(|(s, succ)| {
                    succ.iter()
                        .map(|&sn| (1.0 - gamma) * self.h[s] + gamma * self.h[s].max(v[sn]))
                        .collect()
                })
                .collect()
        }

        /// Iterates the operator to a sup-norm change below `tol`. Returns the
        /// fixed point and the sup-norm change of every iteration.
        pub fn feasible_value_iteration(
            &self,
            init: Vec<Vec<f64>>,
            gamma: f64,
            tol: f64,
            max_iters: usize,
        ) -> (Vec<Vec<f64>>, Vec<f64>) {
            let mut q = init;
            let mut deltas = Vec::new();
            for _ in 0..max_iters {
                let next = self.feasible_backup(&q, gamma);
                let delta = sup_distance(&q, &next);
                q = next;
                deltas.push(delta);
                if delta < tol {
                    break;
                }
            }
            (q, deltas)
        }
    }

    pub fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn state_values(q: &[Vec<f64>]) -> Vec<f64> {
        q.iter()
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}
