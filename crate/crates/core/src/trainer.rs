//! L1 reconstruction training with Adam, evaluation, and checkpoints.
//!
//! A step draws a batch from the train split, computes per-sample gradients
//! on independent tapes (in parallel when the `parallel` feature is on), sums
//! them in batch order, and applies one Adam update. The sum order is fixed,
//! so results do not depend on the thread count.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, MetricReport, SsimMode};
use crate::network::{Network, NetworkConfig, Params};
use crate::rng::{RngState, RngStream};
use crate::tensor::{io as tnsr, DType, Element, Tape, Tensor, Var};

const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const INIT_STREAM: u64 = 0x696e_6974;

/// Builds a network whose initial weights depend only on `seed`.
pub fn initial_network<T: Element>(config: NetworkConfig, seed: u64) -> Result<Network<T>> {
    Network::build(config, &mut RngStream::new(seed).derive(INIT_STREAM))
}

fn default_lr() -> f64 {
    7e-5
}
fn default_batch() -> usize {
    12
}
fn default_steps() -> u64 {
    500
}
fn default_interval() -> u64 {
    100
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Square crop size; `None` trains on whole images.
    #[serde(default)]
    pub crop: Option<usize>,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub ssim_mode: SsimMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.checkpoint_interval == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, steps and intervals must be positive".into(),
            ));
        }
        if self.crop == Some(0) {
            return Err(Error::InvalidArgument("crop must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Mean absolute error over all elements; the subgradient at 0 is 0.
pub fn l1_loss<'t, T: Element>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    pred.sub(&target)?.abs()?.mean()
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &Params<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &Params<T>, c: &TrainConfig) -> Self {
        Self::new(params, c.lr, c.beta1, c.beta2, c.eps)
    }
}

/// One bias-corrected Adam update:
/// `θ ← θ − lr · m̂ / (√v̂ + ε)`, `m̂ = m / (1 − β₁ᵗ)`, `v̂ = v / (1 − β₂ᵗ)`.
pub fn adam_step<T: Element>(params: &mut Params<T>, grads: &[Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "adam_step gradient" });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(state.beta1), c(state.beta2));
    let bc1 = c(1.0 - state.beta1.powi(t));
    let bc2 = c(1.0 - state.beta2.powi(t));
    let (lr, eps) = (c(state.lr), c(state.eps));
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients<T: Element>(net: &Network<T>, input: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let p = net.register(&tape, true);
    let (pred, _) = net.forward_on(tape.constant(input.clone()), &p, &Default::default())?;
    let loss = l1_loss(pred, tape.constant(target.clone()))?;
    let value = loss.value().data()[0].to_f64_lossy();
    let mut grads = tape.backward(loss)?;
    Ok((value, p.vars().map(|v| grads.take(v)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// `(step, loss)`; steps count from 1.
    pub losses: Vec<(u64, f64)>,
    /// Test-split reports at every eval interval and at the end.
    pub evals: Vec<(u64, MetricReport)>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{l}\n"));
        }
        out
    }
}

pub struct Trainer<T> {
    net: Network<T>,
    optim: OptimState<T>,
    rng: RngStream,
    step: u64,
    config: TrainConfig,
}

fn to_element<T: Element>(t: &Tensor<f32>) -> Tensor<T> {
    t.cast()
}

impl<T: Element> Trainer<T> {
    pub fn new(net: Network<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optim = OptimState::from_config(net.params(), &config);
        Ok(Self {
            rng: RngStream::new(config.seed).derive(TRAIN_STREAM),
            net,
            optim,
            step: 0,
            config,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn optimizer(&self) -> &OptimState<T> {
        &self.optim
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn draw_batch(&mut self, train: &[SamplePair]) -> Result<Vec<SamplePair>> {
        let n = train.len();
        let b = self.config.batch_size;
        let picks: Vec<usize> = if b <= n {
            index::sample(self.rng.inner_mut(), n, b).into_vec()
        } else {
            (0..b).map(|_| self.rng.range_inclusive(0, n - 1)).collect()
        };
        let multiple = self.net.config().required_multiple();
        picks
            .into_iter()
            .map(|i| match self.config.crop {
                Some(crop) => random_crop(&train[i], crop, multiple, &mut self.rng),
                None => Ok(train[i].clone()),
            })
            .collect()
    }

    /// One optimization step; returns the batch-mean L1 loss.
    pub fn step(&mut self, train: &[SamplePair]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let batch = self.draw_batch(train)?;
        let step = self.step + 1;
        let diverged = |loss: f64| Error::Divergence { step, loss };
        let per_sample = |pair: &SamplePair| sample_gradients(&self.net, &to_element(&pair.cloudy), &to_element(&pair.clear));
        #[cfg(feature = "parallel")]
        let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = {
            use rayon::prelude::*;
            batch.par_iter().map(per_sample).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = batch.iter().map(per_sample).collect();

        let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
        let mut total_loss = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for r in results {
            let (loss, g) = match r {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            total_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let loss = total_loss / batch.len() as f64;
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        let mut grads = grads.expect("non-empty batch");
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        match adam_step(self.net.params_mut(), &grads, &mut self.optim) {
            Err(Error::NonFinite { .. }) => return Err(diverged(loss)),
            other => other?,
        }
        self.step = step;
        Ok(loss)
    }

    /// Trains until `config.steps` steps are complete. `on_step` runs after
    /// every step with the trainer and the step's loss.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&Trainer<T>, u64, f64) -> Result<()>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog {
            losses: Vec::new(),
            evals: Vec::new(),
        };
        while self.step < self.config.steps {
            let loss = self.step(&data.train)?;
            log.losses.push((self.step, loss));
            if !data.test.is_empty() && (self.step % self.config.eval_interval == 0 || self.step == self.config.steps) {
                let report = evaluate(&self.net, &data.test, &data.sample_ids(crate::data::Split::Test), self.config.ssim_mode)?;
                log.evals.push((self.step, report));
            }
            on_step(self, self.step, loss)?;
        }
        Ok(log)
    }
}

/// Runs the network on every cloudy image (no crop) and scores it against
/// the clear ground truth.
pub fn evaluate<T: Element>(net: &Network<T>, pairs: &[SamplePair], ids: &[String], ssim_mode: SsimMode) -> Result<MetricReport> {
    let samples = pairs
        .iter()
        .zip(ids)
        .map(|(pair, id)| {
            let pred = net.forward(&to_element::<T>(&pair.cloudy))?;
            evaluate_pair(id.clone(), &pred, &to_element::<T>(&pair.clear), ssim_mode)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_samples(samples, ssim_mode)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHeader {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// JSON header of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: DType,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub seed: u64,
    pub rng: RngState,
    pub optimizer: OptimHeader,
    /// Order of the TNSR blocks that follow the header.
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn ensure_compatible(&self, expected: &NetworkConfig) -> Result<()> {
        if &self.network != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint network {:?} differs from expected {:?}",
                self.network, expected
            )));
        }
        Ok(())
    }
}

/// Layout: `"ACKP"`, u32 LE header length, header JSON, then one TNSR block
/// per `header.tensors` entry (parameters, then Adam `m`, then Adam `v`).
pub fn save_checkpoint<T: Element>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let params = trainer.net.params();
    let mut entries = Vec::new();
    let mut blocks = Vec::new();
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        tnsr::encode_into(t, &mut blocks);
    }
    for (prefix, moments) in [("adam.m/", &trainer.optim.m), ("adam.v/", &trainer.optim.v)] {
        for ((name, _), t) in params.iter().zip(moments) {
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
            });
            tnsr::encode_into(t, &mut blocks);
        }
    }
    let o = &trainer.optim;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        network: trainer.net.config().clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        seed: trainer.config.seed,
        rng: trainer.rng.state(),
        optimizer: OptimHeader {
            t: o.t,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        },
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blocks.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blocks);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ckpt_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Reads only the JSON header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes).map(|(h, _)| h)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(0, "missing ACKP magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ckpt_err(4, "header length exceeds file"))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[8..end]).map_err(|e| ckpt_err(8, e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version:?}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| ckpt_err(8, e.to_string()))?;
    Ok((header, end))
}

/// Restores a trainer (network, optimizer, RNG position, step count).
/// Tensors stored at another precision are converted to `T`.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(CheckpointHeader, Trainer<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut pos) = parse_header(&bytes)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let (t, next) = tnsr::decode_at(&bytes, pos)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(ckpt_err(pos, format!("block {} has shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape)));
        }
        tensors.push(t.into_element::<T>());
        pos = next;
    }
    if pos != bytes.len() {
        return Err(ckpt_err(pos, "trailing bytes after the last tensor"));
    }
    let reference = Network::<T>::build(header.network.clone(), &mut RngStream::new(0))?;
    let n = reference.params().len();
    if tensors.len() != 3 * n {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} tensors, network needs {}",
            tensors.len(),
            3 * n
        )));
    }
    let mut it = header.tensors.iter().zip(tensors);
    let mut params = Params::new();
    for (entry, t) in it.by_ref().take(n) {
        params.insert(entry.name.clone(), t);
    }
    let net = Network::from_params(header.network.clone(), params)?;
    let m: Vec<Tensor<T>> = it.by_ref().take(n).map(|(_, t)| t).collect();
    let v: Vec<Tensor<T>> = it.map(|(_, t)| t).collect();
    let o = &header.optimizer;
    let optim = OptimState {
        m,
        v,
        t: o.t,
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
    };
    let rng = RngStream::from_state(&header.rng).ok_or_else(|| ckpt_err(8, "unreadable rng state"))?;
    let trainer = Trainer {
        net,
        optim,
        rng,
        step: header.step,
        config: header.train.clone(),
    };
    Ok((header, trainer))
}

impl<T: Element> Trainer<T> {
    /// Changes the step budget, e.g. to continue a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }
}
