//! Small float64 MLPs with hand-written reverse-mode gradients, Adam, soft
//! target updates, and a binary checkpoint format.
//!
//! Batched tensors are row-major `batch × width` slices. Matrix products go
//! through `matrixmultiply::dgemm`, which is single-threaded and
//! deterministic for a fixed shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out × fan_in`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Gradients with the same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().zip(&self.bias).flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        let pairs = self
            .weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .zip(other.weight.iter().chain(&other.bias));
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Per-layer activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least input")
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides, `c` overwritten
/// when `beta == 0`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the strides above address only elements inside the slices
    // (checked in debug builds), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Mlp {
    /// Fan-in scaled uniform init (`±1/√fan_in`) for weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut RngStream) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight: (0..w[0] * w[1])
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                fan_in: w[0],
                fan_out: w[1],
                weight: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input, batch)?.activations.pop().expect("output"))
    }

    pub fn forward_cached(&self, input: &[f64], batch: usize) -> Result<ForwardCache> {
        if input.len() != batch * self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} values, expected batch {batch} × width {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let x = activations.last().expect("input present");
            let mut z = vec![0.0; batch * layer.fan_out];
            for row in z.chunks_exact_mut(layer.fan_out) {
                row.copy_from_slice(&layer.bias);
            }
            gemm(
                batch,
                layer.fan_in,
                layer.fan_out,
                x,
                (layer.fan_in, 1),
                &layer.weight,
                (1, layer.fan_in),
                1.0,
                &mut z,
                (layer.fan_out, 1),
            );
            if li != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        Ok(ForwardCache { batch, activations })
    }

    /// Gradient of `Σ_b output_b · upstream_b` with respect to every
    /// parameter, plus the gradient with respect to the input batch. ReLU's
    /// derivative at zero is taken as zero.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>)> {
        let batch = cache.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} values, expected {}",
                upstream.len(),
                batch * self.output_dim()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &cache.activations[li];
            // dW = δᵀ · x
            gemm(
                layer.fan_out,
                batch,
                layer.fan_in,
                &delta,
                (1, layer.fan_out),
                x,
                (layer.fan_in, 1),
                0.0,
                &mut grads.weight[li],
                (layer.fan_in, 1),
            );
            let db = &mut grads.bias[li];
            for row in delta.chunks_exact(layer.fan_out) {
                db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            // δ_prev = δ · W, masked by the ReLU that produced x.
            let mut prev = vec![0.0; batch * layer.fan_in];
            gemm(
                batch,
                layer.fan_out,
                layer.fan_in,
                &delta,
                (layer.fan_out, 1),
                &layer.weight,
                (layer.fan_in, 1),
                0.0,
                &mut prev,
                (layer.fan_in, 1),
            );
            if li > 0 {
                prev.iter_mut()
                    .zip(x)
                    .for_each(|(d, &a)| if a <= 0.0 { *d = 0.0 });
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<ParamGrads> {
        let batch = input.len() / self.input_dim().max(1);
        let cache = self.forward_cached(input, batch)?;
        Ok(self.backward_cached(&cache, upstream)?.0)
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.widths == other.widths
    }

    /// FNV-1a over the parameter bit patterns, for cheap change detection.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            for b in p.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// `target ← (1 − α)·target + α·online`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, alpha: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(Error::Shape(format!(
            "soft update between {:?} and {:?}",
            target.widths, online.widths
        )));
    }
    for (t, o) in target.params_mut().zip(online.params()) {
        *t = (1.0 - alpha) * *t + alpha * o;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamGrads,
    pub v: ParamGrads,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected and
/// leave both the network and the optimizer state untouched.
pub fn adam_step(net: &mut Mlp, grads: &ParamGrads, opt: &mut AdamState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::divergence("adam", "non-finite gradient"));
    }
    if grads.weight.len() != net.layers.len()
        || grads
            .weight
            .iter()
            .zip(&net.layers)
            .any(|(g, l)| g.len() != l.weight.len())
    {
        return Err(Error::Shape("gradient layout does not match network".into()));
    }
    opt.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = opt.config;
    let bc1 = 1.0 - beta1.powi(opt.step as i32);
    let bc2 = 1.0 - beta2.powi(opt.step as i32);
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let groups = [
            (&mut layer.weight, &grads.weight[li], &mut opt.m.weight[li], &mut opt.v.weight[li]),
            (&mut layer.bias, &grads.bias[li], &mut opt.m.bias[li], &mut opt.v.bias[li]),
        ];
        for (p, g, m, v) in groups {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// A network plus its optimizer, the unit every trainer works with.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub net: Mlp,
    pub opt: AdamState,
}

impl Trainable {
    pub fn new(widths: &[usize], adam: AdamConfig, rng: &mut RngStream) -> Self {
        let net = Mlp::new(widths, rng);
        let opt = AdamState::new(&net, adam);
        Self { net, opt }
    }

    pub fn apply(&mut self, grads: &ParamGrads) -> Result<()> {
        adam_step(&mut self.net, grads, &mut self.opt)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetEntry {
    pub name: String,
    pub widths: Vec<usize>,
    pub has_adam: bool,
    #[serde(default)]
    pub adam_step: u64,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: u64,
    pub seed: u64,
    pub nets: Vec<NetEntry>,
    /// Free-form metadata owned by the writer (schedules, normalization).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named networks, each optionally with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub nets: Vec<(String, Mlp, Option<AdamState>)>,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64, meta: serde_json::Value) -> Self {
        Self {
            step,
            seed,
            meta,
            nets: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, net: &Mlp, opt: Option<&AdamState>) {
        self.nets.push((name.to_string(), net.clone(), opt.cloned()));
    }

    pub fn push_trainable(&mut self, name: &str, t: &Trainable) {
        self.push(name, &t.net, Some(&t.opt));
    }

    pub fn get(&self, name: &str) -> Result<&Mlp> {
        self.nets
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, net, _)| net)
            .ok_or_else(|| Error::Checkpoint(format!("missing network {name:?}")))
    }

    pub fn get_trainable(&self, name: &str) -> Result<Trainable> {
        let (_, net, opt) = self
            .nets
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing network {name:?}")))?;
        let opt = opt
            .clone()
            .unwrap_or_else(|| AdamState::new(net, AdamConfig::default()));
        Ok(Trainable {
            net: net.clone(),
            opt,
        })
    }

    /// Layout: `b"RSCK"`, `u32` header length, header JSON, then for each
    /// network its parameters (and, if present, Adam `m` then `v`) as
    /// little-endian `f64`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            step: self.step,
            seed: self.seed,
            meta: self.meta.clone(),
            nets: self
                .nets
                .iter()
                .map(|(name, net, opt)| NetEntry {
                    name: name.clone(),
                    widths: net.widths.clone(),
                    has_adam: opt.is_some(),
                    adam_step: opt.as_ref().map_or(0, |o| o.step),
                    adam: opt.as_ref().map(|o| o.config),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_json).map_err(io)?;
        for (_, net, opt) in &self.nets {
            for p in net.params() {
                w.write_all(&p.to_le_bytes()).map_err(io)?;
            }
            if let Some(o) = opt {
                for g in o.m.iter().chain(o.v.iter()) {
                    w.write_all(&g.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(io)?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut buf).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&buf)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut read_f64 = |dst: &mut f64| -> Result<()> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint("truncated parameter blob".into()))?;
            *dst = f64::from_le_bytes(b);
            Ok(())
        };
        let mut nets = Vec::with_capacity(header.nets.len());
        for entry in &header.nets {
            let mut net = Mlp::zeros(&entry.widths);
            for p in net.params_mut() {
                read_f64(p)?;
            }
            let opt = if entry.has_adam {
                let mut o = AdamState::new(&net, entry.adam.unwrap_or_default());
                o.step = entry.adam_step;
                for buf in [&mut o.m, &mut o.v] {
                    for (w, b) in buf.weight.iter_mut().zip(buf.bias.iter_mut()) {
                        for g in w.iter_mut().chain(b.iter_mut()) {
                            read_f64(g)?;
                        }
                    }
                }
                Some(o)
            } else {
                None
            };
            nets.push((entry.name.clone(), net, opt));
        }
        Ok(Self {
            step: header.step,
            seed: header.seed,
            meta: header.meta,
            nets,
        })
    }
}
