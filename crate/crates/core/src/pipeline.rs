//! Run configuration, the three training stages, evaluation with
//! candidate selection, feasible-region dumps, and sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, compute_stats, Dataset, DatasetStats, GenerateConfig, HMode};
use crate::diffusion::{
    dataset_weights, ActionSpace, DiffusionPolicy, GaussianPolicy, PolicyConfig, PolicyTrainReport,
    WeightConfig, WeightMode,
};
use crate::env::{
    oracle_feasible, sample_start, step, Action, EnvConfig, EnvState, ScriptedController, ACT_DIM,
    OBS_DIM,
};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::rng::{ns, substream, RngStream};
use crate::value::{CriticBank, CriticConfig, CriticKind, SafetySignal, StepLosses};

pub const DEFAULT_TRAIN_STEPS: usize = 200_000;

/// Index offset separating infeasible-start episode streams from
/// feasible-start ones.
const INFEASIBLE_STREAM_OFFSET: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Cost values replace reachability values.
    NoHj,
    /// Zero weight at infeasible states.
    NoInfeasible,
    /// Unit-variance Gaussian head instead of diffusion.
    NoDiffusion,
    /// Safe imitation; no reward critics.
    IlMode,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoHj,
        Variant::NoInfeasible,
        Variant::NoDiffusion,
        Variant::IlMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHj => "no_hj",
            Variant::NoInfeasible => "no_infeasible",
            Variant::NoDiffusion => "no_diffusion",
            Variant::IlMode => "il_mode",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn safety(self) -> SafetySignal {
        match self {
            Variant::NoHj => SafetySignal::COST,
            _ => SafetySignal::FEASIBLE,
        }
    }

    fn weight_mode(self) -> WeightMode {
        match self {
            Variant::Full | Variant::NoHj | Variant::NoDiffusion => WeightMode::Feasibility,
            Variant::NoInfeasible => WeightMode::FeasibleOnly,
            Variant::IlMode => WeightMode::Imitation,
        }
    }

    fn needs_reward(self) -> bool {
        self != Variant::IlMode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset file; generated from the fields below when absent.
    pub path: Option<PathBuf>,
    pub n_scripted: usize,
    pub n_random: usize,
    pub seed: u64,
    pub controller: ScriptedController,
    pub h_mode: HMode,
    pub sparse_m: f64,
    pub normalize_obs: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenerateConfig::default();
        Self {
            path: None,
            n_scripted: g.n_scripted,
            n_random: g.n_random,
            seed: g.seed,
            controller: g.controller,
            h_mode: HMode::Geometric,
            sparse_m: dataset::DEFAULT_SPARSE_M,
            normalize_obs: true,
        }
    }
}

impl DataConfig {
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            n_scripted: self.n_scripted,
            n_random: self.n_random,
            seed: self.seed,
            controller: self.controller,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Feasible (or cost) critic updates.
    pub safety_steps: usize,
    pub reward_steps: usize,
    pub policy_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            safety_steps: DEFAULT_TRAIN_STEPS,
            reward_steps: DEFAULT_TRAIN_STEPS,
            policy_steps: DEFAULT_TRAIN_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub candidates: usize,
    pub episodes: usize,
    /// Also roll out `episodes` episodes from oracle-infeasible starts.
    pub include_infeasible: bool,
    pub cost_limit: f64,
    pub epsilon: f64,
    pub region_resolution: usize,
    pub region_speed: f64,
    /// Evaluation threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            candidates: 16,
            episodes: 100,
            include_infeasible: false,
            cost_limit: 5.0,
            epsilon: 0.0,
            region_resolution: 100,
            region_speed: 1.0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub weights: WeightConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            variant: Variant::Full,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            critic: CriticConfig::default(),
            train: TrainConfig::default(),
            weights: WeightConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.critic.validate()?;
        self.weights.validate()?;
        self.policy.validate()?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config("run_id must be a nonempty file name".into()));
        }
        if self.eval.candidates == 0 || self.eval.episodes == 0 {
            return Err(Error::Config("eval.candidates and eval.episodes must be at least 1".into()));
        }
        if !(self.eval.cost_limit >= 0.0) || !(self.eval.epsilon >= 0.0) {
            return Err(Error::Config("eval.cost_limit and eval.epsilon must be nonnegative".into()));
        }
        if self.eval.cost_limit + self.eval.epsilon == 0.0 {
            return Err(Error::Config("eval.cost_limit + eval.epsilon must be positive".into()));
        }
        if self.eval.region_resolution == 0 {
            return Err(Error::Config("eval.region_resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` with a dot-separated key path. The value is parsed
    /// as JSON when possible and taken as a string otherwise. Keys must
    /// already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        let updated: Self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override {key:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn file(&self, dir: &Path, suffix: &str) -> PathBuf {
        dir.join(format!("{}.{suffix}", self.run_id))
    }
}

/// Generates the dataset described by `cfg.data`, relabeled if sparse.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = dataset::generate(&cfg.env, &cfg.data.generate_config())?;
    match cfg.data.h_mode {
        HMode::Geometric => Ok(data),
        HMode::Sparse => dataset::relabel_sparse_h(&data, cfg.data.sparse_m),
    }
}

fn stats_for(cfg: &RunConfig, data: &Dataset) -> Result<DatasetStats> {
    if cfg.data.normalize_obs {
        compute_stats(data)
    } else {
        Ok(DatasetStats::identity(data.obs_dim))
    }
}

fn action_space(cfg: &RunConfig, stats: DatasetStats) -> ActionSpace {
    ActionSpace {
        stats,
        action_scale: cfg.env.action_scale().to_vec(),
        clip: 1.0,
    }
}

/// One row of the critic training curve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss_vh: Option<f64>,
    pub loss_qh: Option<f64>,
    pub loss_vr: Option<f64>,
    pub loss_qr: Option<f64>,
    pub mean_vh: Option<f64>,
}

fn merge_curves(safety: &[StepLosses], reward: &[StepLosses]) -> Vec<CurveRow> {
    let mut rows: BTreeMap<usize, CurveRow> = BTreeMap::new();
    for l in safety {
        let r = rows.entry(l.step).or_insert(CurveRow { step: l.step, ..Default::default() });
        r.loss_vh = Some(l.loss_v);
        r.loss_qh = Some(l.loss_q);
        r.mean_vh = Some(l.mean_v);
    }
    for l in reward {
        let r = rows.entry(l.step).or_insert(CurveRow { step: l.step, ..Default::default() });
        r.loss_vr = Some(l.loss_v);
        r.loss_qr = Some(l.loss_q);
    }
    rows.into_values().collect()
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("step,loss_Vh,loss_Qh,loss_Vr,loss_Qr,mean_Vh\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            f(r.loss_vh),
            f(r.loss_qh),
            f(r.loss_vr),
            f(r.loss_qr),
            f(r.mean_vh)
        );
    }
    out
}

/// Stages 1 and 2: safety critics (feasible, or cost for `no_hj`) then
/// reward critics when the variant needs them.
pub fn train_critics(cfg: &RunConfig, data: &Dataset) -> Result<(CriticBank, Vec<CurveRow>)> {
    cfg.validate()?;
    let stats = stats_for(cfg, data)?;
    let mut bank = CriticBank::new(cfg.critic.clone(), stats, cfg.env.action_scale().to_vec())?;
    let safety = cfg.variant.safety().kind;
    let (ns_train, init_idx) = match safety {
        CriticKind::Cost => (ns::COST_TRAIN, 2),
        _ => (ns::FEASIBLE_TRAIN, 0),
    };
    let safety_curve = bank.train(
        safety,
        data,
        cfg.train.safety_steps,
        &mut substream(cfg.seed, ns::NET_INIT, init_idx),
        &mut substream(cfg.seed, ns_train, 0),
    )?;
    let reward_curve = if cfg.variant.needs_reward() {
        bank.train(
            CriticKind::Reward,
            data,
            cfg.train.reward_steps,
            &mut substream(cfg.seed, ns::NET_INIT, 1),
            &mut substream(cfg.seed, ns::REWARD_TRAIN, 0),
        )?
    } else {
        Vec::new()
    };
    Ok((bank, merge_curves(&safety_curve, &reward_curve)))
}

/// Trains cost critics into an existing bank, for comparing regions.
pub fn train_cost_critics(cfg: &RunConfig, bank: &mut CriticBank, data: &Dataset) -> Result<Vec<StepLosses>> {
    bank.train(
        CriticKind::Cost,
        data,
        cfg.train.safety_steps,
        &mut substream(cfg.seed, ns::NET_INIT, 2),
        &mut substream(cfg.seed, ns::COST_TRAIN, 0),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    Diffusion(DiffusionPolicy),
    Gaussian(GaussianPolicy),
}

impl PolicyHead {
    pub fn sample(&self, obs: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            PolicyHead::Diffusion(p) => p.sample(obs, rng),
            PolicyHead::Gaussian(p) => p.sample(obs, rng),
        }
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let (mut ck, head) = match self {
            PolicyHead::Diffusion(p) => (p.to_checkpoint(step, seed), "diffusion"),
            PolicyHead::Gaussian(p) => (p.to_checkpoint(step, seed), "gaussian"),
        };
        ck.meta["head"] = head.into();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.meta["head"].as_str() {
            Some("diffusion") => Ok(PolicyHead::Diffusion(DiffusionPolicy::from_checkpoint(ck)?)),
            Some("gaussian") => Ok(PolicyHead::Gaussian(GaussianPolicy::from_checkpoint(ck)?)),
            other => Err(Error::Checkpoint(format!("unknown policy head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub max: f64,
    pub zero_fraction: f64,
}

impl WeightSummary {
    fn of(w: &[f64]) -> Self {
        let n = w.len().max(1) as f64;
        Self {
            mean: w.iter().sum::<f64>() / n,
            max: w.iter().copied().fold(0.0, f64::max),
            zero_fraction: w.iter().filter(|x| **x == 0.0).count() as f64 / n,
        }
    }
}

/// Stage 3 against frozen critics.
pub fn train_policy(
    cfg: &RunConfig,
    data: &Dataset,
    bank: &CriticBank,
) -> Result<(PolicyHead, PolicyTrainReport, WeightSummary)> {
    let weights = dataset_weights(
        bank,
        data,
        &cfg.weights,
        cfg.variant.weight_mode(),
        cfg.variant.safety(),
    )?;
    let summary = WeightSummary::of(&weights);
    let space = action_space(cfg, bank.stats.clone());
    let mut init = substream(cfg.seed, ns::NET_INIT, 10);
    let mut rng = substream(cfg.seed, ns::POLICY_TRAIN, 0);
    let (head, report) = if cfg.variant == Variant::NoDiffusion {
        let mut p = GaussianPolicy::new(&cfg.policy, space, &mut init)?;
        let r = p.train(data, &weights, cfg.train.policy_steps, &mut rng)?;
        (PolicyHead::Gaussian(p), r)
    } else {
        let mut p = DiffusionPolicy::new(cfg.policy.clone(), space, &mut init)?;
        let r = p.train(data, &weights, cfg.train.policy_steps, &mut rng)?;
        (PolicyHead::Diffusion(p), r)
    };
    Ok((head, report, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub config: RunConfig,
    pub bank: CriticBank,
    pub policy: PolicyHead,
    pub curves: Vec<CurveRow>,
    pub policy_report: PolicyTrainReport,
    pub weights: WeightSummary,
}

/// All three stages in order. Critics are frozen before stage 3 and
/// checked unchanged afterwards.
pub fn train_full(cfg: &RunConfig, data: &Dataset) -> Result<Artifacts> {
    let (bank, curves) = train_critics(cfg, data)?;
    assemble(cfg, data, bank, curves)
}

/// Stage 3 on top of already trained critics.
pub fn assemble(cfg: &RunConfig, data: &Dataset, bank: CriticBank, curves: Vec<CurveRow>) -> Result<Artifacts> {
    let before = bank.checksum();
    let (policy, policy_report, weights) = train_policy(cfg, data, &bank)?;
    if bank.checksum() != before {
        return Err(Error::divergence("policy", "critic parameters changed during policy training"));
    }
    Ok(Artifacts {
        config: cfg.clone(),
        bank,
        policy,
        curves,
        policy_report,
        weights,
    })
}

pub fn write_artifacts(dir: &Path, art: &Artifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &art.config;
    let steps = (cfg.train.safety_steps + cfg.train.reward_steps) as u64;
    art.bank
        .to_checkpoint(steps, cfg.seed)?
        .write(&cfg.file(dir, "critics.ckpt"))?;
    art.policy
        .to_checkpoint(cfg.train.policy_steps as u64, cfg.seed)
        .write(&cfg.file(dir, "policy.ckpt"))?;
    write_text(&cfg.file(dir, "curves.csv"), &curves_csv(&art.curves))?;
    let mut policy_csv = String::from("step,loss\n");
    for l in &art.policy_report.curve {
        let _ = writeln!(policy_csv, "{},{}", l.step, l.loss);
    }
    write_text(&cfg.file(dir, "policy_curve.csv"), &policy_csv)?;
    let summary = serde_json::json!({
        "skipped_batches": art.policy_report.skipped_batches,
        "weights": art.weights,
        "critic_checksum": format!("{:016x}", art.bank.checksum()),
    });
    write_text(&cfg.file(dir, "train.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_text(&cfg.file(dir, "config.json"), &cfg.to_json())
}

pub fn load_artifacts(dir: &Path, cfg: &RunConfig) -> Result<(CriticBank, PolicyHead)> {
    let bank = CriticBank::from_checkpoint(&Checkpoint::read(&cfg.file(dir, "critics.ckpt"))?)?;
    let policy = PolicyHead::from_checkpoint(&Checkpoint::read(&cfg.file(dir, "policy.ckpt"))?)?;
    Ok((bank, policy))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Index of the first minimum; NaN entries never win.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Draws `n` candidates at one state and keeps the one with the lowest
/// safety `Q`. Returns the action and the chosen index.
pub fn select_action(
    policy: &PolicyHead,
    bank: &CriticBank,
    signal: SafetySignal,
    obs: &[f64],
    n: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    let obs_rep: Vec<f64> = obs.iter().copied().cycle().take(obs.len() * n).collect();
    let cands = policy.sample(&obs_rep, rng)?;
    let ad = cands.len() / n;
    if n == 1 {
        return Ok((cands, 0));
    }
    let q = bank.safety_q(signal, &obs_rep, &cands)?;
    let i = argmin_first(&q);
    Ok((cands[i * ad..(i + 1) * ad].to_vec(), i))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub reward_return: f64,
    pub cost_return: f64,
    pub violation_steps: usize,
    pub steps: usize,
    pub reached_goal: bool,
    pub start_feasible: bool,
}

/// Rolls out one episode. Costs are charged on the state each action is
/// taken from, matching the dataset labels.
pub fn run_episode(
    start: EnvState,
    env: &EnvConfig,
    mut act: impl FnMut(&EnvState) -> Result<Action>,
) -> Result<EpisodeRecord> {
    let mut rec = EpisodeRecord {
        reward_return: 0.0,
        cost_return: 0.0,
        violation_steps: 0,
        steps: 0,
        reached_goal: false,
        start_feasible: oracle_feasible(&start, env),
    };
    let mut s = start;
    loop {
        let c = env.constraint_violation(s.x, s.y).max(0.0);
        rec.cost_return += c;
        rec.violation_steps += usize::from(c > 0.0);
        let a = act(&s)?;
        let out = step(&s, &a, env)?;
        rec.reward_return += out.reward;
        rec.steps += 1;
        s = out.state;
        if out.done {
            rec.reached_goal = out.reached_goal;
            return Ok(rec);
        }
    }
}

/// Start state whose oracle label equals `feasible`, by rejection.
pub fn sample_labeled_start(env: &EnvConfig, feasible: bool, rng: &mut RngStream) -> EnvState {
    loop {
        let s = sample_start(env, rng);
        if oracle_feasible(&s, env) == feasible {
            return s;
        }
    }
}

/// Return range and start-class violation statistics of the offline data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSummary {
    pub r_min: f64,
    pub r_max: f64,
    pub episodes: usize,
    pub feasible_start_episodes: usize,
    pub infeasible_start_episodes: usize,
    pub feasible_start_mean_violation_steps: f64,
    pub infeasible_start_mean_violation_steps: f64,
}

impl BehaviorSummary {
    pub fn from_dataset(data: &Dataset, env: &EnvConfig) -> Result<Self> {
        let eps = dataset::episode_summaries(data);
        if eps.is_empty() {
            return Err(crate::error::DatasetError::Empty.into());
        }
        let mut r_min = f64::INFINITY;
        let mut r_max = f64::NEG_INFINITY;
        let mut sums = [(0usize, 0usize); 2];
        for (range, s) in &eps {
            r_min = r_min.min(s.reward_return);
            r_max = r_max.max(s.reward_return);
            let start = EnvState::from_observation(data.obs_row(range.start));
            let k = usize::from(oracle_feasible(&start, env));
            sums[k].0 += 1;
            sums[k].1 += s.violation_steps;
        }
        let mean = |(n, v): (usize, usize)| if n == 0 { 0.0 } else { v as f64 / n as f64 };
        Ok(Self {
            r_min,
            r_max,
            episodes: eps.len(),
            feasible_start_episodes: sums[1].0,
            infeasible_start_episodes: sums[0].0,
            feasible_start_mean_violation_steps: mean(sums[1]),
            infeasible_start_mean_violation_steps: mean(sums[0]),
        })
    }
}

pub fn normalized_reward(r: f64, r_min: f64, r_max: f64) -> f64 {
    if r_max > r_min {
        (r - r_min) / (r_max - r_min)
    } else {
        0.0
    }
}

pub fn normalized_cost(c: f64, limit: f64, epsilon: f64) -> f64 {
    (c + epsilon) / (limit + epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StartBreakdown {
    pub episodes: usize,
    pub mean_reward_return: f64,
    pub mean_cost_return: f64,
    pub normalized_reward: f64,
    pub normalized_cost: f64,
    pub mean_violation_steps: f64,
    pub goal_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub candidates: usize,
    /// Over feasible-start episodes.
    pub normalized_reward: f64,
    pub normalized_cost: f64,
    pub goal_rate: f64,
    pub mean_violation_steps: f64,
    pub feasible_starts: StartBreakdown,
    pub infeasible_starts: Option<StartBreakdown>,
    pub reward_returns: Vec<f64>,
    pub cost_returns: Vec<f64>,
    pub violation_steps: Vec<usize>,
    pub reached_goal: Vec<bool>,
    pub start_feasible: Vec<bool>,
    pub behavior: BehaviorSummary,
    pub cost_limit: f64,
    pub epsilon: f64,
}

fn breakdown(recs: &[EpisodeRecord], b: &BehaviorSummary, cfg: &EvalConfig) -> StartBreakdown {
    let n = recs.len().max(1) as f64;
    let r = recs.iter().map(|e| e.reward_return).sum::<f64>() / n;
    let c = recs.iter().map(|e| e.cost_return).sum::<f64>() / n;
    StartBreakdown {
        episodes: recs.len(),
        mean_reward_return: r,
        mean_cost_return: c,
        normalized_reward: normalized_reward(r, b.r_min, b.r_max),
        normalized_cost: normalized_cost(c, cfg.cost_limit, cfg.epsilon),
        mean_violation_steps: recs.iter().map(|e| e.violation_steps as f64).sum::<f64>() / n,
        goal_rate: recs.iter().filter(|e| e.reached_goal).count() as f64 / n,
    }
}

fn worker_count(cfg: &EvalConfig) -> usize {
    if cfg.workers > 0 {
        cfg.workers
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Runs `count` episodes with per-episode streams, spread over workers.
/// Results do not depend on the worker count.
fn run_episodes(
    cfg: &RunConfig,
    count: usize,
    feasible: bool,
    policy: &PolicyHead,
    bank: &CriticBank,
) -> Result<Vec<EpisodeRecord>> {
    let workers = worker_count(&cfg.eval).min(count).max(1);
    let signal = cfg.variant.safety();
    let offset = if feasible { 0 } else { INFEASIBLE_STREAM_OFFSET };
    let one = |i: usize| -> Result<EpisodeRecord> {
        let idx = offset + i as u32;
        let start = sample_labeled_start(&cfg.env, feasible, &mut substream(cfg.seed, ns::EVAL_START, idx));
        let mut rng = substream(cfg.seed, ns::EVAL_EPISODE, idx);
        run_episode(start, &cfg.env, |s| {
            let (a, _) = select_action(policy, bank, signal, &s.observation(), cfg.eval.candidates, &mut rng)?;
            Ok(Action::new(a[0], a[1]))
        })
    };
    let mut out: Vec<Option<Result<EpisodeRecord>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                scope.spawn(move || {
                    (w..count)
                        .step_by(workers)
                        .map(|i| (i, one(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every episode ran")).collect()
}

pub fn evaluate(
    cfg: &RunConfig,
    policy: &PolicyHead,
    bank: &CriticBank,
    behavior: &BehaviorSummary,
) -> Result<EvalReport> {
    cfg.validate()?;
    let feas = run_episodes(cfg, cfg.eval.episodes, true, policy, bank)?;
    let infeas = if cfg.eval.include_infeasible {
        Some(run_episodes(cfg, cfg.eval.episodes, false, policy, bank)?)
    } else {
        None
    };
    let fb = breakdown(&feas, behavior, &cfg.eval);
    let all: Vec<&EpisodeRecord> = feas.iter().chain(infeas.iter().flatten()).collect();
    Ok(EvalReport {
        run_id: cfg.run_id.clone(),
        variant: cfg.variant,
        seed: cfg.seed,
        candidates: cfg.eval.candidates,
        normalized_reward: fb.normalized_reward,
        normalized_cost: fb.normalized_cost,
        goal_rate: fb.goal_rate,
        mean_violation_steps: fb.mean_violation_steps,
        feasible_starts: fb,
        infeasible_starts: infeas.as_ref().map(|r| breakdown(r, behavior, &cfg.eval)),
        reward_returns: all.iter().map(|e| e.reward_return).collect(),
        cost_returns: all.iter().map(|e| e.cost_return).collect(),
        violation_steps: all.iter().map(|e| e.violation_steps).collect(),
        reached_goal: all.iter().map(|e| e.reached_goal).collect(),
        start_feasible: all.iter().map(|e| e.start_feasible).collect(),
        behavior: *behavior,
        cost_limit: cfg.eval.cost_limit,
        epsilon: cfg.eval.epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_h: Option<f64>,
    pub v_c: Option<f64>,
    pub oracle_feasible: bool,
}

/// `(x, y)` grid slice at fixed speed, heading toward the goal per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub resolution: usize,
    pub speed: f64,
    pub cells: Vec<RegionCell>,
}

pub fn region_states(env: &EnvConfig, resolution: usize, speed: f64) -> Vec<EnvState> {
    let w = env.arena_half_width;
    let cell = 2.0 * w / resolution as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let x = -w + (i as f64 + 0.5) * cell;
            let y = -w + (j as f64 + 0.5) * cell;
            let (dx, dy) = (env.goal_center[0] - x, env.goal_center[1] - y);
            let theta = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
            out.push(EnvState::new(x, y, speed, theta));
        }
    }
    out
}

pub fn dump_region(bank: &CriticBank, env: &EnvConfig, resolution: usize, speed: f64) -> Result<RegionGrid> {
    let states = region_states(env, resolution, speed);
    let obs: Vec<f64> = states.iter().flat_map(|s| s.observation()).collect();
    let v_h = bank.feasible.as_ref().map(|_| bank.v(CriticKind::Feasible, &obs)).transpose()?;
    let v_c = bank.cost.as_ref().map(|_| bank.v(CriticKind::Cost, &obs)).transpose()?;
    let cells = states
        .iter()
        .enumerate()
        .map(|(i, s)| RegionCell {
            x: s.x,
            y: s.y,
            theta: s.theta,
            v_h: v_h.as_ref().map(|v| v[i]),
            v_c: v_c.as_ref().map(|v| v[i]),
            oracle_feasible: oracle_feasible(s, env),
        })
        .collect();
    Ok(RegionGrid { resolution, speed, cells })
}

/// Agreement of a learned feasible set with the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    /// Intersection over union of the two feasible sets.
    pub iou: f64,
    /// Oracle-infeasible cells labeled feasible, over oracle-infeasible cells.
    pub false_feasible_rate: f64,
    pub learned_feasible_fraction: f64,
}

pub fn region_score(learned: &[bool], oracle: &[bool]) -> RegionScore {
    let (mut inter, mut union, mut ff, mut infeasible, mut lf) = (0, 0, 0, 0, 0);
    for (&l, &o) in learned.iter().zip(oracle) {
        inter += usize::from(l && o);
        union += usize::from(l || o);
        infeasible += usize::from(!o);
        ff += usize::from(l && !o);
        lf += usize::from(l);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    RegionScore {
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        false_feasible_rate: ratio(ff, infeasible),
        learned_feasible_fraction: ratio(lf, learned.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub oracle_feasible_fraction: f64,
    pub feasible_value: Option<RegionScore>,
    pub cost_value: Option<RegionScore>,
}

pub fn region_metrics(grid: &RegionGrid) -> RegionMetrics {
    let oracle: Vec<bool> = grid.cells.iter().map(|c| c.oracle_feasible).collect();
    let score = |f: fn(&RegionCell) -> Option<bool>| -> Option<RegionScore> {
        let learned: Option<Vec<bool>> = grid.cells.iter().map(f).collect();
        learned.map(|l| region_score(&l, &oracle))
    };
    RegionMetrics {
        oracle_feasible_fraction: oracle.iter().filter(|o| **o).count() as f64 / oracle.len().max(1) as f64,
        feasible_value: score(|c| c.v_h.map(|v| v <= SafetySignal::FEASIBLE.threshold)),
        cost_value: score(|c| c.v_c.map(|v| v <= SafetySignal::COST.threshold)),
    }
}

pub fn region_csv(grid: &RegionGrid) -> String {
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("x,y,v,theta,v_h,v_c,oracle_feasible\n");
    for c in &grid.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.x,
            c.y,
            grid.speed,
            c.theta,
            f(c.v_h),
            f(c.v_c),
            u8::from(c.oracle_feasible)
        );
    }
    out
}

/// Heatmap of the learned feasible value (or cost value when no feasible
/// critic exists) with the learned zero level set in black, the oracle
/// boundary in green, hazards in red and the goal in blue.
pub fn region_svg(grid: &RegionGrid, env: &EnvConfig) -> String {
    const PX: f64 = 600.0;
    let n = grid.resolution;
    let w = env.arena_half_width;
    let scale = PX / (2.0 * w);
    let to_px = |x: f64, y: f64| ((x + w) * scale, (w - y) * scale);
    let value = |c: &RegionCell| c.v_h.or(c.v_c.map(|v| v - SafetySignal::COST.threshold));
    let vals: Vec<f64> = grid.cells.iter().filter_map(value).collect();
    let vmax = vals.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
    let cell = PX / n as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PX}" height="{PX}" viewBox="0 0 {PX} {PX}">"#
    );
    for (k, c) in grid.cells.iter().enumerate() {
        let (i, j) = (k % n, k / n);
        let fill = match value(c) {
            Some(v) => {
                let t = (v / vmax).clamp(-1.0, 1.0);
                let (r, g, b) = if t > 0.0 {
                    (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
                } else {
                    (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
                };
                format!("rgb({},{},{})", r as u8, g as u8, b as u8)
            }
            None => "rgb(220,220,220)".into(),
        };
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
            i as f64 * cell,
            PX - (j + 1) as f64 * cell,
            cell + 0.05,
            cell + 0.05
        );
    }
    // Boundaries between horizontally or vertically adjacent cells whose
    // labels differ.
    let mut edges = |label: &dyn Fn(&RegionCell) -> Option<bool>, color: &str| {
        let mut d = String::new();
        for j in 0..n {
            for i in 0..n {
                let here = label(&grid.cells[j * n + i]);
                if i + 1 < n && here != label(&grid.cells[j * n + i + 1]) {
                    let x = (i + 1) as f64 * cell;
                    let _ = write!(d, "M{:.2} {:.2}V{:.2}", x, PX - j as f64 * cell, PX - (j + 1) as f64 * cell);
                }
                if j + 1 < n && here != label(&grid.cells[(j + 1) * n + i]) {
                    let y = PX - (j + 1) as f64 * cell;
                    let _ = write!(d, "M{:.2} {:.2}H{:.2}", i as f64 * cell, y, (i + 1) as f64 * cell);
                }
            }
        }
        let _ = writeln!(s, r#"<path d="{d}" stroke="{color}" stroke-width="2" fill="none"/>"#);
    };
    edges(&|c| value(c).map(|v| v <= 0.0), "black");
    edges(&|c| Some(c.oracle_feasible), "green");
    for h in &env.hazard_centers {
        let (cx, cy) = to_px(h[0], h[1]);
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" stroke="red" stroke-width="2" fill="none"/>"#,
            env.hazard_radius * scale
        );
    }
    let (gx, gy) = to_px(env.goal_center[0], env.goal_center[1]);
    let _ = writeln!(
        s,
        r#"<circle cx="{gx:.2}" cy="{gy:.2}" r="{:.2}" stroke="blue" stroke-width="2" fill="none"/>"#,
        env.goal_radius * scale
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Tau,
    Candidates,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "n" | "candidates" => Ok(SweepParam::Candidates),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }

    pub fn values(self) -> &'static [f64] {
        match self {
            SweepParam::Tau => &[0.7, 0.8, 0.9, 0.95],
            SweepParam::Candidates => &[1.0, 4.0, 16.0, 64.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Candidates => "candidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub normalized_reward: f64,
    pub normalized_cost: f64,
    pub goal_rate: f64,
    pub mean_violation_steps: f64,
}

impl SweepRow {
    fn from_report(param: SweepParam, value: f64, r: &EvalReport) -> Self {
        Self {
            param: param.name().into(),
            value,
            normalized_reward: r.normalized_reward,
            normalized_cost: r.normalized_cost,
            goal_rate: r.goal_rate,
            mean_violation_steps: r.mean_violation_steps,
        }
    }
}

/// One evaluation per grid value. `τ` retrains everything; `N` reuses one
/// trained run.
pub fn sweep(cfg: &RunConfig, data: &Dataset, param: SweepParam) -> Result<Vec<SweepRow>> {
    let behavior = BehaviorSummary::from_dataset(data, &cfg.env)?;
    let mut rows = Vec::new();
    match param {
        SweepParam::Tau => {
            for &tau in param.values() {
                let mut c = cfg.clone();
                c.critic.tau = tau;
                let art = train_full(&c, data)?;
                let r = evaluate(&c, &art.policy, &art.bank, &behavior)?;
                rows.push(SweepRow::from_report(param, tau, &r));
            }
        }
        SweepParam::Candidates => {
            let art = train_full(cfg, data)?;
            for &n in param.values() {
                let mut c = cfg.clone();
                c.eval.candidates = n as usize;
                let r = evaluate(&c, &art.policy, &art.bank, &behavior)?;
                rows.push(SweepRow::from_report(param, n, &r));
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,normalized_reward,normalized_cost,goal_rate,mean_violation_steps\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.param, r.value, r.normalized_reward, r.normalized_cost, r.goal_rate, r.mean_violation_steps
        );
    }
    out
}

/// Dimensions the toy pipeline expects in a dataset.
pub fn check_toy_dims(data: &Dataset) -> Result<()> {
    if data.obs_dim != OBS_DIM || data.act_dim != ACT_DIM {
        return Err(Error::Shape(format!(
            "expected ({OBS_DIM}, {ACT_DIM}) dataset dims, found ({}, {})",
            data.obs_dim, data.act_dim
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalized_cost(5.0, 10.0, 0.0), 0.5);
        // Zero cost with a zero limit sits exactly on the safety boundary.
        assert_eq!(normalized_cost(0.0, 0.0, 1.0), 1.0);
        assert_eq!(normalized_reward(3.0, 1.0, 3.0), 1.0);
        assert_eq!(normalized_reward(1.0, 1.0, 3.0), 0.0);
    }

    #[test]
    fn argmin_examples() {
        assert_eq!(argmin_first(&[0.3, -0.1, 0.0]), 1);
        assert_eq!(argmin_first(&[0.2, -0.5, -0.5]), 1);
        assert_eq!(argmin_first(&[f64::NAN, 1.0]), 1);
        assert_eq!(argmin_first(&[4.0]), 0);
    }

    #[test]
    fn override_paths() {
        let mut c = RunConfig::default();
        c.apply_override("critic.tau=0.7").unwrap();
        assert_eq!(c.critic.tau, 0.7);
        c.apply_override("variant=no_hj").unwrap();
        assert_eq!(c.variant, Variant::NoHj);
        c.apply_override("run_id=abc").unwrap();
        assert_eq!(c.run_id, "abc");
        assert!(c.apply_override("critic.nope=1").is_err());
        assert!(c.apply_override("critic.tau=1.5").is_err());
        assert!(c.apply_override("critic.tau").is_err());
        assert!(c.apply_override("eval.candidates=0").is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        // Missing sections fall back to defaults.
        let partial = RunConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.eval.candidates, 16);
    }

    #[test]
    fn region_score_examples() {
        let s = region_score(&[true, true, false, false], &[true, false, false, true]);
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.false_feasible_rate - 0.5).abs() < 1e-15);
    }

    #[test]
    fn region_labels_at_landmarks() {
        let env = EnvConfig::default();
        let inside = EnvState::new(env.hazard_centers[0][0], env.hazard_centers[0][1], 1.0, 0.0);
        assert!(!oracle_feasible(&inside, &env));
        let goal = EnvState::new(env.goal_center[0], env.goal_center[1], 0.0, 0.0);
        assert!(oracle_feasible(&goal, &env));
    }

    #[test]
    fn curve_merge_aligns_steps() {
        let l = |step, v| StepLosses {
            step,
            loss_v: v,
            loss_q: v,
            mean_v: v,
        };
        let rows = merge_curves(&[l(10, 1.0), l(20, 2.0)], &[l(20, 3.0)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].loss_vr, Some(3.0));
        assert_eq!(rows[0].loss_vr, None);
        assert!(curves_csv(&rows).starts_with("step,loss_Vh,loss_Qh,loss_Vr,loss_Qr,mean_Vh\n10,1,1,,,1\n"));
    }
}
