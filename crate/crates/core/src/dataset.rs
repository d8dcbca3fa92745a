//! Offline transition datasets: generation on the reach-avoid task, sparse
//! relabeling of the violation signal, binary persistence, and observation
//! statistics.
//!
//! The `c` and `h` columns describe the state the action was taken from, so
//! a row reads `(s, a, s', r, c(s), h(s), done)`. `done` is set only when the
//! episode ended by reaching the goal; step-limit truncation keeps `done = 0`
//! so value targets bootstrap through it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{
    random_action, sample_start, step, Action, EnvConfig, EnvState, ScriptedController, ACT_DIM,
    OBS_DIM,
};
use crate::error::{DatasetError, Error, Result};
use crate::rng::{ns, substream};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSDS";
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_SPARSE_M: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMode {
    /// `h` is the signed distance-based violation, `c = max(h, 0)`.
    Geometric,
    /// `h ∈ {-1, M}` derived from the sign of `c`.
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub c: f64,
    pub h: f64,
    pub done: bool,
}

/// Column-major transition store.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub h_mode: HMode,
    pub sparse_m: Option<f64>,
    pub env_config_hash: String,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub h: Vec<f64>,
    pub done: Vec<bool>,
}

impl Dataset {
    pub fn new(obs_dim: usize, act_dim: usize, env_config_hash: impl Into<String>) -> Self {
        Self {
            obs_dim,
            act_dim,
            h_mode: HMode::Geometric,
            sparse_m: None,
            env_config_hash: env_config_hash.into(),
            obs: Vec::new(),
            act: Vec::new(),
            next_obs: Vec::new(),
            reward: Vec::new(),
            cost: Vec::new(),
            h: Vec::new(),
            done: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        assert_eq!(t.s.len(), self.obs_dim);
        assert_eq!(t.a.len(), self.act_dim);
        assert_eq!(t.s_next.len(), self.obs_dim);
        self.obs.extend_from_slice(&t.s);
        self.act.extend_from_slice(&t.a);
        self.next_obs.extend_from_slice(&t.s_next);
        self.reward.push(t.r);
        self.cost.push(t.c);
        self.h.push(t.h);
        self.done.push(t.done);
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn act_row(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn next_obs_row(&self, i: usize) -> &[f64] {
        &self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn get(&self, i: usize) -> Transition {
        Transition {
            s: self.obs_row(i).to_vec(),
            a: self.act_row(i).to_vec(),
            s_next: self.next_obs_row(i).to_vec(),
            r: self.reward[i],
            c: self.cost[i],
            h: self.h[i],
            done: self.done[i],
        }
    }

    pub fn extend(&mut self, other: &Dataset) {
        assert_eq!((self.obs_dim, self.act_dim), (other.obs_dim, other.act_dim));
        self.obs.extend_from_slice(&other.obs);
        self.act.extend_from_slice(&other.act);
        self.next_obs.extend_from_slice(&other.next_obs);
        self.reward.extend_from_slice(&other.reward);
        self.cost.extend_from_slice(&other.cost);
        self.h.extend_from_slice(&other.h);
        self.done.extend_from_slice(&other.done);
    }

    /// Splits the rows into trajectories. A new trajectory starts after a
    /// terminal row or wherever `s` does not continue the previous `s'`
    /// (compared bitwise).
    pub fn episodes(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.len() {
            let continues = !self.done[i - 1]
                && self
                    .next_obs_row(i - 1)
                    .iter()
                    .zip(self.obs_row(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !continues {
                out.push(start..i);
                start = i;
            }
        }
        if !self.is_empty() {
            out.push(start..self.len());
        }
        out
    }

    /// Checks the per-row invariants: every entry finite, costs nonnegative,
    /// and the `c`/`h` relation of the current labeling mode.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.len();
        let widths_ok = self.obs.len() == n * self.obs_dim
            && self.next_obs.len() == n * self.obs_dim
            && self.act.len() == n * self.act_dim
            && self.cost.len() == n
            && self.h.len() == n
            && self.done.len() == n;
        if !widths_ok {
            return Err(DatasetError::Layout("column lengths disagree".into()));
        }
        let fail = |index: usize, reason: &str| DatasetError::Invariant {
            index,
            reason: reason.to_string(),
        };
        for i in 0..n {
            let finite = self.obs_row(i).iter().all(|v| v.is_finite())
                && self.act_row(i).iter().all(|v| v.is_finite())
                && self.next_obs_row(i).iter().all(|v| v.is_finite())
                && self.reward[i].is_finite()
                && self.cost[i].is_finite()
                && self.h[i].is_finite();
            if !finite {
                return Err(fail(i, "non-finite entry"));
            }
            if self.cost[i] < 0.0 {
                return Err(fail(i, "negative cost"));
            }
            match self.h_mode {
                HMode::Geometric => {
                    if self.cost[i] != self.h[i].max(0.0) {
                        return Err(fail(i, "c != max(h, 0)"));
                    }
                }
                HMode::Sparse => {
                    let m = self.sparse_m.unwrap_or(DEFAULT_SPARSE_M);
                    let expected = if self.cost[i] > 0.0 { m } else { -1.0 };
                    if self.h[i] != expected {
                        return Err(fail(i, "sparse h inconsistent with c"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_scripted: usize,
    pub n_random: usize,
    pub seed: u64,
    pub controller: ScriptedController,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_scripted: 50_000,
            n_random: 50_000,
            seed: 0,
            controller: ScriptedController::default(),
        }
    }
}

fn rollout_into(
    data: &mut Dataset,
    cfg: &EnvConfig,
    budget: usize,
    namespace: u32,
    seed: u64,
    mut policy: impl FnMut(&EnvState, &mut crate::rng::RngStream) -> Action,
) {
    let mut produced = 0;
    let mut episode = 0u32;
    while produced < budget {
        let mut rng = substream(seed, namespace, episode);
        episode += 1;
        let mut s = sample_start(cfg, &mut rng);
        loop {
            let a = policy(&s, &mut rng);
            let out = step(&s, &a, cfg).expect("generator produces finite states");
            let h = cfg.constraint_violation(s.x, s.y);
            data.push(Transition {
                s: s.observation().to_vec(),
                a: a.clipped(cfg).as_array().to_vec(),
                s_next: out.state.observation().to_vec(),
                r: out.reward,
                c: h.max(0.0),
                h,
                done: out.reached_goal,
            });
            produced += 1;
            s = out.state;
            if out.done || produced >= budget {
                break;
            }
        }
    }
}

/// Rolls out the scripted controller for `n_scripted` transitions followed by
/// a uniform-random policy for `n_random` transitions. Each episode draws
/// from its own `(seed, episode)` substream.
pub fn generate(cfg: &EnvConfig, gen: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    if gen.n_scripted + gen.n_random == 0 {
        return Err(Error::Config(
            "dataset generation needs at least one transition".into(),
        ));
    }
    let mut data = Dataset::new(OBS_DIM, ACT_DIM, cfg.hash());
    let ctrl = gen.controller;
    rollout_into(
        &mut data,
        cfg,
        gen.n_scripted,
        ns::SCRIPTED_EPISODE,
        gen.seed,
        |s, rng| ctrl.act(s, cfg, rng),
    );
    rollout_into(
        &mut data,
        cfg,
        gen.n_random,
        ns::RANDOM_EPISODE,
        gen.seed,
        |_, rng| random_action(cfg, rng),
    );
    Ok(data)
}

/// Replaces `h` with `-1` on safe rows and `m` on rows with positive cost.
pub fn relabel_sparse_h(data: &Dataset, m: f64) -> Result<Dataset> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Config(format!("sparse M must be positive, got {m}")));
    }
    let mut out = data.clone();
    for (h, &c) in out.h.iter_mut().zip(&data.cost) {
        *h = if c > 0.0 { m } else { -1.0 };
    }
    out.h_mode = HMode::Sparse;
    out.sparse_m = Some(m);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub width: usize,
}

/// Header record stored at the front of the binary file and mirrored in the
/// JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub fields: Vec<FieldSpec>,
    pub env_config_hash: String,
    pub count: u64,
    pub h_mode: HMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_m: Option<f64>,
}

impl DatasetHeader {
    fn for_dataset(data: &Dataset) -> Self {
        let f = |name: &str, width| FieldSpec {
            name: name.into(),
            width,
        };
        Self {
            version: DATASET_FORMAT_VERSION,
            fields: vec![
                f("s", data.obs_dim),
                f("a", data.act_dim),
                f("s_next", data.obs_dim),
                f("r", 1),
                f("c", 1),
                f("h", 1),
                f("done", 1),
            ],
            env_config_hash: data.env_config_hash.clone(),
            count: data.len() as u64,
            h_mode: data.h_mode,
            sparse_m: data.sparse_m,
        }
    }

    pub fn row_width(&self) -> usize {
        self.fields.iter().map(|f| f.width).sum()
    }

    fn dims(&self) -> Result<(usize, usize), DatasetError> {
        let names: Vec<&str> = self.fields.iter().map(|f| f.name.as_str()).collect();
        if names != ["s", "a", "s_next", "r", "c", "h", "done"] {
            return Err(DatasetError::Layout(format!("unexpected field order {names:?}")));
        }
        let w: Vec<usize> = self.fields.iter().map(|f| f.width).collect();
        if w[0] != w[2] || w[3..].iter().any(|&x| x != 1) {
            return Err(DatasetError::Layout(format!("unexpected field widths {w:?}")));
        }
        Ok((w[0], w[1]))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Writes the binary dataset and its sibling manifest.
///
/// Layout: `b"RSDS"`, `u32` header length, header JSON, then `count` rows of
/// little-endian `f64` in field order (`done` stored as 0.0 / 1.0).
pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    let header = DatasetHeader::for_dataset(data);
    let header_json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for i in 0..data.len() {
        let done = if data.done[i] { 1.0 } else { 0.0 };
        let row = data
            .obs_row(i)
            .iter()
            .chain(data.act_row(i))
            .chain(data.next_obs_row(i))
            .chain([
                &data.reward[i],
                &data.cost[i],
                &data.h[i],
                &done,
            ]);
        for v in row {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    let manifest = manifest_path(path);
    std::fs::write(&manifest, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DatasetError::BadMagic)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic.into());
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_slice(&buf)?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::VersionMismatch {
            expected: DATASET_FORMAT_VERSION,
            found: header.version,
        }
        .into());
    }
    Ok(header)
}

/// Loads a dataset, checking the format version, the row count against both
/// the header and the manifest (when present), and every row invariant.
pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;
    let (obs_dim, act_dim) = header.dims()?;

    let manifest = manifest_path(path);
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: DatasetHeader = serde_json::from_str(&text)?;
        if m.version != header.version {
            return Err(DatasetError::VersionMismatch {
                expected: header.version,
                found: m.version,
            }
            .into());
        }
        if m.count != header.count {
            return Err(DatasetError::Truncated {
                expected: m.count,
                found: header.count,
            }
            .into());
        }
    }

    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let row_bytes = header.row_width() * 8;
    let rows = (body.len() / row_bytes) as u64;
    if body.len() % row_bytes != 0 || rows != header.count {
        return Err(DatasetError::Truncated {
            expected: header.count,
            found: rows,
        }
        .into());
    }

    let mut data = Dataset::new(obs_dim, act_dim, header.env_config_hash.clone());
    data.h_mode = header.h_mode;
    data.sparse_m = header.sparse_m;
    let mut vals = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    for _ in 0..header.count {
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let s = take(obs_dim);
        let a = take(act_dim);
        let s_next = take(obs_dim);
        let tail = take(4);
        data.push(Transition {
            s,
            a,
            s_next,
            r: tail[0],
            c: tail[1],
            h: tail[2],
            done: tail[3] != 0.0,
        });
    }
    data.validate()?;
    Ok(data)
}

/// Like [`load`], but fails with [`DatasetError::HashMismatch`] when the file
/// was generated under a different environment config.
pub fn load_checked(path: &Path, cfg: &EnvConfig) -> Result<Dataset> {
    let data = load(path)?;
    let expected = cfg.hash();
    if data.env_config_hash != expected {
        return Err(DatasetError::HashMismatch {
            expected,
            found: data.env_config_hash,
        }
        .into());
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub count: usize,
}

impl DatasetStats {
    /// Statistics that leave observations unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            obs_mean: vec![0.0; dim],
            obs_std: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        let mut out = obs.to_vec();
        self.normalize_in_place(&mut out);
        out
    }

    /// Normalizes a row-major block of observations.
    pub fn normalize_in_place(&self, obs: &mut [f64]) {
        let d = self.obs_mean.len();
        if d == 0 {
            return;
        }
        for row in obs.chunks_exact_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.obs_mean).zip(&self.obs_std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Per-dimension population mean and standard deviation (floored at 1e-6).
pub fn compute_stats(data: &Dataset) -> Result<DatasetStats> {
    if data.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let d = data.obs_dim;
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for row in data.obs.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in data.obs.chunks_exact(d) {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(DatasetStats {
        obs_mean: mean,
        obs_std: std,
        count: data.len(),
    })
}

pub fn normalize(obs: &[f64], stats: &DatasetStats) -> Vec<f64> {
    stats.normalize(obs)
}

/// Undiscounted reward and cost return plus violation count of one
/// trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub reward_return: f64,
    pub cost_return: f64,
    pub violation_steps: usize,
}

pub fn episode_summaries(data: &Dataset) -> Vec<(Range<usize>, EpisodeSummary)> {
    data.episodes()
        .into_iter()
        .map(|r| {
            let summary = EpisodeSummary {
                reward_return: data.reward[r.clone()].iter().sum(),
                cost_return: data.cost[r.clone()].iter().sum(),
                violation_steps: data.cost[r.clone()].iter().filter(|&&c| c > 0.0).count(),
            };
            (r, summary)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Dataset {
        let gen = GenerateConfig {
            n_scripted: 600,
            n_random: 400,
            seed,
            ..Default::default()
        };
        generate(&EnvConfig::default(), &gen).unwrap()
    }

    #[test]
    fn generate_counts() {
        let d = small(1);
        assert_eq!(d.len(), 1000);
        d.validate().unwrap();
    }

    #[test]
    fn generate_rejects_zero_total() {
        let gen = GenerateConfig {
            n_scripted: 0,
            n_random: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate(&EnvConfig::default(), &gen),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noiseless_scripted_rollouts_are_deterministic_controller_paths() {
        let cfg = EnvConfig::default();
        let ctrl = ScriptedController::noiseless();
        let gen = GenerateConfig {
            n_scripted: 500,
            n_random: 0,
            seed: 4,
            controller: ctrl,
        };
        let d = generate(&cfg, &gen).unwrap();
        for i in 0..d.len() {
            let s = EnvState::from_observation(d.obs_row(i));
            let a = ctrl.nominal(&s, &cfg);
            assert!((a.accel - d.act_row(i)[0]).abs() < 1e-9);
            assert!((a.turn - d.act_row(i)[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(small(9), small(9));
        assert_ne!(small(9), small(10));
    }

    #[test]
    fn sparse_relabel() {
        let mut d = Dataset::new(1, 1, "x");
        for (c, h) in [(0.0, -0.3), (0.2, 0.2)] {
            d.push(Transition {
                s: vec![0.0],
                a: vec![0.0],
                s_next: vec![0.0],
                r: 0.0,
                c,
                h,
                done: false,
            });
        }
        let s = relabel_sparse_h(&d, 25.0).unwrap();
        assert_eq!(s.h, vec![-1.0, 25.0]);
        assert_eq!(relabel_sparse_h(&s, 25.0).unwrap(), s);
        assert!(relabel_sparse_h(&d, 0.0).is_err());
    }

    #[test]
    fn stats_population_convention() {
        let mut d = Dataset::new(2, 1, "x");
        for v in [0.0, 1.0, 2.0] {
            d.push(Transition {
                s: vec![v, 5.0],
                a: vec![0.0],
                s_next: vec![v, 5.0],
                r: 0.0,
                c: 0.0,
                h: -1.0,
                done: false,
            });
        }
        let st = compute_stats(&d).unwrap();
        assert!((st.obs_mean[0] - 1.0).abs() < 1e-15);
        assert!((st.obs_std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(st.obs_std[1], STD_FLOOR);
        assert_eq!(normalize(&[7.0, 5.0], &st)[1], 0.0);
        assert!(normalize(&st.obs_mean, &st).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stats_reject_empty() {
        let d = Dataset::new(2, 1, "x");
        assert!(matches!(
            compute_stats(&d),
            Err(Error::Dataset(DatasetError::Empty))
        ));
    }

    #[test]
    fn episodes_partition_rows() {
        let d = small(2);
        let eps = d.episodes();
        assert_eq!(eps.first().unwrap().start, 0);
        assert_eq!(eps.last().unwrap().end, d.len());
        for w in eps.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        // Episode boundaries only where a fresh start was drawn.
        assert!(eps.len() > 2);
    }

    #[test]
    fn sign_of_h_matches_positive_cost() {
        let d = small(3);
        for i in 0..d.len() {
            assert_eq!(d.h[i] > 0.0, d.cost[i] > 0.0);
        }
    }
}
