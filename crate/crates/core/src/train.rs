//! Two-phase training pipeline, evaluation, sampling and ablation.
//!
//! Phase one pretrains a factor-free model to expose per-dimension log-det
//! maps; a factorization plan is derived from those maps; phase two trains
//! a fresh model whose factor layers follow the plan. Pixels enter the flow
//! through dequantization and a logit transform whose exact log-jacobian is
//! folded back into the reported bits/dim, so all numbers refer to the
//! discrete data. Every random choice is drawn from a named substream of
//! one seed, which makes full runs replayable bit for bit.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BoundParams, Graph, NodeId, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{build_model, scale_boundaries, ArchConfig, FlowModel, MapSnapshot, LN_2PI};
use crate::plan::{derive_plan, FactorizationPlan, Strategy};
use crate::tensor::Tensor;

const LN_2: f64 = std::f64::consts::LN_2;
/// Largest representable pixel value below 256 (decode clamps into [0, 256)).
const MAX_PIXEL: f64 = 255.999_999_999_999_97;
/// Scale clamp bound of every coupling layer.
pub const SCALE_CLAMP: f64 = 4.0;
/// Rows per forward chunk during evaluation.
const EVAL_CHUNK: usize = 256;
/// Largest reference batch used to read log-det maps off a pretrained model.
pub const PLAN_REFERENCE_ROWS: usize = 512;

/// Named random substreams of the run seed.
pub mod stream {
    /// Parameter initialization (both phases build from the same draw).
    pub const INIT: u64 = 0;
    /// Epoch shuffling of training examples.
    pub const SHUFFLE: u64 = 1;
    /// Dequantization noise of training batches.
    pub const TRAIN_NOISE: u64 = 2;
    /// Dequantization noise of evaluation passes (fresh per evaluation).
    pub const EVAL_NOISE: u64 = 3;
    /// Dequantization noise of the plan reference batch.
    pub const PLAN_REFERENCE: u64 = 4;
    /// Prior draws when sampling.
    pub const SAMPLE: u64 = 5;
}

/// Deterministic generator for one substream of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub dequant_alpha: f64,
    pub scales: usize,
    pub couplings_per_scale: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Pretraining epochs; `None` means 30% of `epochs`, rounded up.
    pub pretrain_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            weight_decay: 5e-5,
            dequant_alpha: 0.05,
            scales: 2,
            couplings_per_scale: 2,
            hidden: 64,
            seed: 0,
            pretrain_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Config(detail);
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(bad("epochs and batch-size must be positive".into()));
        }
        if self.scales == 0 || self.couplings_per_scale == 0 || self.hidden == 0 {
            return Err(bad("scales, couplings-per-scale and hidden must be positive".into()));
        }
        for (name, v) in [
            ("learning-rate", self.learning_rate),
            ("adam-epsilon", self.adam_epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(bad(format!("weight-decay must be non-negative, got {}", self.weight_decay)));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(bad(format!("adam-betas must lie in [0, 1), got {b1},{b2}")));
        }
        if !(self.dequant_alpha > 0.0 && self.dequant_alpha < 0.5) {
            return Err(bad(format!(
                "dequant-alpha must lie in (0, 0.5), got {}",
                self.dequant_alpha
            )));
        }
        Ok(())
    }

    pub fn effective_pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or((3 * self.epochs).div_ceil(10))
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            couplings_per_scale: self.couplings_per_scale,
            hidden: self.hidden,
            scale_clamp: SCALE_CLAMP,
        }
    }

    /// Parses a key=value config file; `#` starts a comment, every field of
    /// the config is settable, unknown keys are rejected.
    pub fn parse(text: &str, path: &str) -> Result<TrainConfig> {
        let bad = |detail: String| Error::format(path, detail);
        let mut cfg = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("expected key=value, got '{line}'")))?;
            let invalid = || bad(format!("invalid value for '{key}': '{value}'"));
            match key {
                "epochs" => cfg.epochs = value.parse().map_err(|_| invalid())?,
                "batch-size" => cfg.batch_size = value.parse().map_err(|_| invalid())?,
                "learning-rate" => cfg.learning_rate = value.parse().map_err(|_| invalid())?,
                "adam-betas" => {
                    let (a, b) = value.split_once(',').ok_or_else(invalid)?;
                    cfg.adam_betas = (
                        a.trim().parse().map_err(|_| invalid())?,
                        b.trim().parse().map_err(|_| invalid())?,
                    );
                }
                "adam-epsilon" => cfg.adam_epsilon = value.parse().map_err(|_| invalid())?,
                "weight-decay" => cfg.weight_decay = value.parse().map_err(|_| invalid())?,
                "dequant-alpha" => cfg.dequant_alpha = value.parse().map_err(|_| invalid())?,
                "scales" => cfg.scales = value.parse().map_err(|_| invalid())?,
                "couplings-per-scale" => {
                    cfg.couplings_per_scale = value.parse().map_err(|_| invalid())?
                }
                "hidden" => cfg.hidden = value.parse().map_err(|_| invalid())?,
                "seed" => cfg.seed = value.parse().map_err(|_| invalid())?,
                "pretrain-epochs" => {
                    cfg.pretrain_epochs = Some(value.parse().map_err(|_| invalid())?)
                }
                other => return Err(bad(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let display = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        TrainConfig::parse(&text, &display)
    }
}

// ── Preprocessing ────────────────────────────────────────────────────

/// Dequantizes and logit-transforms a `[B, D]` batch of integer pixels in
/// `[0, 256)`: u = α + (1−α)(x+noise)/256, output logit(u). Also returns
/// the per-example log-jacobian of the whole map,
/// Σ_i [log(1−α) − log 256 − log u_i − log(1−u_i)], which converts model
/// likelihoods back to the discrete data.
pub fn preprocess<R: Rng + ?Sized>(
    x: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    for &v in x.data() {
        if v.fract() != 0.0 || !(0.0..256.0).contains(&v) {
            return Err(Error::Data(format!("pixel value {v} is not an integer in [0, 256)")));
        }
    }
    let noise: Vec<f64> = (0..x.numel()).map(|_| rng.random::<f64>()).collect();
    preprocess_with_noise(x, alpha, &noise)
}

pub(crate) fn preprocess_with_noise(
    x: &Tensor,
    alpha: f64,
    noise: &[f64],
) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 {
        return Err(Error::shape("preprocess", format!("expected [B, D], got {:?}", x.shape())));
    }
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(b * d);
    let mut corr = vec![0.0; b];
    let base = (1.0 - alpha).ln() - 256.0_f64.ln();
    for (flat, (&v, &n)) in x.data().iter().zip(noise).enumerate() {
        let u = alpha + (1.0 - alpha) * (v + n) / 256.0;
        out.push((u / (1.0 - u)).ln());
        corr[flat / d] += base - u.ln() - (1.0 - u).ln();
    }
    Ok((Tensor::new(vec![b, d], out)?, Tensor::new(vec![b], corr)?))
}

/// Inverse of the preprocessing map with zero noise: sigmoid, un-shift by
/// α, rescale to pixels, clamp into [0, 256).
pub fn decode_pixels(y: &Tensor, alpha: f64) -> Result<Tensor> {
    let data = y
        .data()
        .iter()
        .map(|&v| {
            let u = 1.0 / (1.0 + (-v).exp());
            (256.0 * (u - alpha) / (1.0 - alpha)).clamp(0.0, MAX_PIXEL)
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

// ── Loss and optimizer ───────────────────────────────────────────────

/// Builds the full training loss on `g`: mean negative log-likelihood of
/// the batch at node `x` (continuous, `[B, D]`) plus `weight_decay` times
/// the squared norm of the decaying parameters.
pub fn loss_graph(
    model: &FlowModel,
    g: &mut Graph,
    x: NodeId,
    bound: &BoundParams,
    weight_decay: f64,
) -> Result<NodeId> {
    let batch = g.value(x).shape()[0] as f64;
    let fwd = model.forward_graph(g, x, bound)?;
    let mut ll = fwd.log_det;
    for &z in &fwd.z_parts {
        let d = g.value(z).shape()[1] as f64;
        let sq = g.mul(z, z)?;
        let ssum = g.reduce_sum(sq, &[1])?;
        let scaled = g.mul_scalar(ssum, -0.5)?;
        let prior = g.add_scalar(scaled, -0.5 * d * LN_2PI)?;
        ll = g.add(ll, prior)?;
    }
    let total = g.reduce_sum(ll, &[0])?;
    let mut loss = g.mul_scalar(total, -1.0 / batch)?;
    if weight_decay > 0.0 {
        let mut penalty: Option<NodeId> = None;
        for id in model.params.ids() {
            if !model.params.decays(id) {
                continue;
            }
            let p = bound.node(id);
            let sq = g.mul(p, p)?;
            let s = g.sum_all(sq)?;
            penalty = Some(match penalty {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        if let Some(p) = penalty {
            let scaled = g.mul_scalar(p, weight_decay)?;
            loss = g.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

/// Adam with bias correction; L2 regularization lives inside the loss, so
/// the update sees it through the gradients.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Adam {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).numel()).collect();
        Adam {
            lr: cfg.learning_rate,
            b1: cfg.adam_betas.0,
            b2: cfg.adam_betas.1,
            eps: cfg.adam_epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update from per-parameter gradients in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for (slot, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let value = store.value(id);
            if grads[slot].shape() != value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {slot} shape {:?}", grads[slot].shape()),
                ));
            }
            let mut data = value.data().to_vec();
            for (i, &g) in grads[slot].data().iter().enumerate() {
                let m = &mut self.m[slot][i];
                let v = &mut self.v[slot][i];
                *m = self.b1 * *m + (1.0 - self.b1) * g;
                *v = self.b2 * *v + (1.0 - self.b2) * g * g;
                data[i] -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
            store.set_value(id, Tensor::new(value.shape().to_vec(), data)?);
        }
        Ok(())
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetric {
    pub epoch: usize,
    pub split: Split,
    pub bits_per_dim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    /// Strategy and seed of the plan the run followed.
    pub plan_ref: String,
    pub rows: Vec<EpochMetric>,
}

impl RunMetrics {
    pub fn final_valid_bpd(&self) -> Result<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == Split::Valid)
            .map(|r| r.bits_per_dim)
            .ok_or_else(|| Error::Data("run has no validation metrics".into()))
    }

    pub fn bpd_series(&self, split: Split) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.bits_per_dim).collect()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,split,bits_per_dim,seconds")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.3}", r.epoch, r.split, r.bits_per_dim, r.seconds)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::file(&path, e))?;
        let mut f = std::io::BufWriter::new(f);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Mean bits/dim of continuous `[m, D]` data, optionally shifted by a
/// per-example log-jacobian correction: −mean(ll + corr) / (D·ln 2).
/// Examples are reduced in row order, so chunking cannot change the result.
pub fn bits_per_dim(model: &FlowModel, x: &Tensor, correction: Option<&Tensor>) -> Result<f64> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    if let Some(c) = correction {
        if c.shape() != [m] {
            return Err(Error::shape("bits_per_dim", format!("correction shape {:?}", c.shape())));
        }
    }
    let mut sum = 0.0;
    let mut row = 0;
    while row < m {
        let end = (row + EVAL_CHUNK).min(m);
        let ll = model.log_likelihood(&x.slice(0, row, end)?)?;
        for (i, &v) in ll.data().iter().enumerate() {
            sum += v + correction.map_or(0.0, |c| c.data()[row + i]);
        }
        row = end;
    }
    Ok(-sum / (m as f64 * d as f64 * LN_2))
}

/// Bits/dim of discrete `[m, D]` data under the full pipeline: dequantize
/// with noise from `rng`, preprocess, evaluate, fold the correction back in.
pub fn evaluate_bpd<R: Rng + ?Sized>(
    model: &FlowModel,
    x_discrete: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<f64> {
    let (xc, corr) = preprocess(x_discrete, alpha, rng)?;
    bits_per_dim(model, &xc, Some(&corr))
}

// ── Training loops ───────────────────────────────────────────────────

fn divergence_from(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Domain { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

fn train_step(
    model: &mut FlowModel,
    adam: &mut Adam,
    xc: &Tensor,
    weight_decay: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.input(xc.clone());
    let loss = loss_graph(model, &mut g, x, &bound, weight_decay)?;
    let loss_value = g.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::domain("train_step", "non-finite loss"));
    }
    let grads = g.backward(loss)?;
    let per_param: Vec<Tensor> = model
        .params
        .ids()
        .map(|id| {
            grads
                .get(bound.node(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.params.value(id).shape()))
        })
        .collect();
    adam.step(&mut model.params, &per_param)?;
    Ok(loss_value)
}

/// Epoch loop shared by both phases: shuffled minibatches, fresh
/// dequantization noise per batch, Adam updates, per-epoch train/validation
/// bits/dim (epoch 0 is the untrained model). Non-finite arithmetic during
/// a step aborts with a divergence error naming epoch and batch.
pub(crate) fn train_loop(
    model: &mut FlowModel,
    cfg: &TrainConfig,
    ds: &Dataset,
    epochs: usize,
    plan_ref: String,
) -> Result<RunMetrics> {
    let train = ds.train_matrix()?;
    let valid = ds.valid_matrix()?;
    let n_train = train.shape()[0];
    let mut adam = Adam::new(cfg, &model.params);
    let mut shuffle_rng = substream(cfg.seed, stream::SHUFFLE);
    let mut noise_rng = substream(cfg.seed, stream::TRAIN_NOISE);
    let start = Instant::now();
    let mut rows = Vec::new();
    let evaluate = |model: &FlowModel, epoch: usize, rows: &mut Vec<EpochMetric>| -> Result<()> {
        for (split, data) in [(Split::Train, &train), (Split::Valid, &valid)] {
            let mut eval_rng = substream(cfg.seed, stream::EVAL_NOISE);
            let bpd = evaluate_bpd(model, data, cfg.dequant_alpha, &mut eval_rng)?;
            rows.push(EpochMetric {
                epoch,
                split,
                bits_per_dim: bpd,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    };
    evaluate(model, 0, &mut rows)?;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = train.gather(0, chunk)?;
            let (xc, _) = preprocess(&xb, cfg.dequant_alpha, &mut noise_rng)?;
            train_step(model, &mut adam, &xc, cfg.weight_decay)
                .map_err(|e| divergence_from(e, epoch, bi))?;
        }
        evaluate(model, epoch, &mut rows)?;
    }
    Ok(RunMetrics { plan_ref, rows })
}

/// Preprocessed reference batch (up to [`PLAN_REFERENCE_ROWS`] training
/// rows, fixed noise substream) used to read log-det maps off a pretrained
/// model. Plan derivation and pretraining must agree on this batch.
pub fn plan_reference(cfg: &TrainConfig, ds: &Dataset) -> Result<Tensor> {
    let train = ds.train_matrix()?;
    let rows = train.shape()[0].min(PLAN_REFERENCE_ROWS);
    let reference = train.slice(0, 0, rows)?;
    let mut rng = substream(cfg.seed, stream::PLAN_REFERENCE);
    Ok(preprocess(&reference, cfg.dequant_alpha, &mut rng)?.0)
}

/// Phase one: trains a factor-free model for the pretraining budget and
/// returns it with the log-det maps at every scale boundary, averaged over
/// the reference batch.
pub fn pretrain(cfg: &TrainConfig, ds: &Dataset) -> Result<(FlowModel, Vec<MapSnapshot>)> {
    cfg.validate()?;
    ds.validate()?;
    let mut init_rng = substream(cfg.seed, stream::INIT);
    let mut model = build_model(ds.layout(), cfg.scales, None, &cfg.arch(), &mut init_rng)?;
    let epochs = cfg.effective_pretrain_epochs();
    if epochs > 0 {
        train_loop(&mut model, cfg, ds, epochs, "pretrain".into())?;
    }
    let reference = plan_reference(cfg, ds)?;
    let (_, snaps) = model.forward_traced(&reference)?;
    let maps = scale_boundaries(&model)?.into_iter().map(|b| snaps[b].clone()).collect();
    Ok((model, maps))
}

/// Phase two: trains a fresh model whose factor layers follow `plan`.
pub fn train_with_plan(
    cfg: &TrainConfig,
    ds: &Dataset,
    plan: &FactorizationPlan,
) -> Result<(FlowModel, RunMetrics)> {
    cfg.validate()?;
    ds.validate()?;
    if plan.input != ds.layout() {
        return Err(Error::Plan(format!(
            "plan input {} does not match dataset {}",
            plan.input,
            ds.layout()
        )));
    }
    let factors = plan.to_factor_layers()?;
    let mut init_rng = substream(cfg.seed, stream::INIT);
    let mut model =
        build_model(ds.layout(), cfg.scales, Some(&factors), &cfg.arch(), &mut init_rng)?;
    let plan_ref = format!("{}:{}", plan.strategy, plan.seed);
    let metrics = train_loop(&mut model, cfg, ds, cfg.epochs, plan_ref)?;
    Ok((model, metrics))
}

// ── Sampling and interpolation ───────────────────────────────────────

/// Draws `n` rows of standard-normal latents for every factored part of the
/// model, in emission order — the prior side of [`sample`].
pub fn draw_prior<R: Rng + ?Sized>(model: &FlowModel, n: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    model
        .part_dims()?
        .iter()
        .map(|&d| {
            let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(vec![n, d], data)
        })
        .collect()
}

/// Draws `n` images: standard-normal latents for every factored part,
/// inverse flow, inverse preprocessing, clamp to [0, 256). Returns
/// `[n, s, s, c]` continuous pixel values.
pub fn sample<R: Rng + ?Sized>(
    model: &FlowModel,
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Data("cannot sample zero images".into()));
    }
    let parts = draw_prior(model, n, rng)?;
    let y = model.inverse(&parts)?;
    let l = model.input_layout;
    decode_pixels(&y, alpha)?.reshape(&[n, l.s, l.s, l.c])
}

/// Encodes an `[s, s, c]` image with zero dequantization noise and returns
/// its latent parts.
fn encode_image(model: &FlowModel, x: &Tensor, alpha: f64) -> Result<Vec<Tensor>> {
    let l = model.input_layout;
    if x.shape() != [l.s, l.s, l.c] {
        return Err(Error::shape(
            "interpolate",
            format!("expected [{}, {}, {}], got {:?}", l.s, l.s, l.c, x.shape()),
        ));
    }
    let flat = x.reshape(&[1, l.dims()])?;
    let (xc, _) = preprocess_with_noise(&flat, alpha, &vec![0.0; l.dims()])?;
    Ok(model.forward(&xc)?.z_parts)
}

/// Linear latent interpolation: encodes both images, blends every latent
/// part at `steps` evenly spaced weights λ ∈ [0, 1], decodes each point.
/// Returns `steps` images of continuous pixels in [0, 256).
pub fn interpolate(
    model: &FlowModel,
    x_a: &Tensor,
    x_b: &Tensor,
    steps: usize,
    alpha: f64,
) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::Data(format!("need at least 2 interpolation steps, got {steps}")));
    }
    let za = encode_image(model, x_a, alpha)?;
    let zb = encode_image(model, x_b, alpha)?;
    let l = model.input_layout;
    let mut frames = Vec::with_capacity(steps);
    for t in 0..steps {
        let lambda = t as f64 / (steps - 1) as f64;
        let parts: Vec<Tensor> = za
            .iter()
            .zip(&zb)
            .map(|(a, b)| a.mul_scalar(1.0 - lambda)?.add(&b.mul_scalar(lambda)?))
            .collect::<Result<_>>()?;
        let y = model.inverse(&parts)?;
        frames.push(decode_pixels(&y, alpha)?.reshape(&[l.s, l.s, l.c])?);
    }
    Ok(frames)
}

// ── Ablation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub final_valid_bpd: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub strategy: Strategy,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

impl AblationReport {
    /// Deterministic per-run table; wall-clock timing deliberately stays
    /// out so reruns with the same seeds are byte-identical.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "strategy,seed,final_valid_bpd")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.strategy, r.seed, r.final_valid_bpd)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "strategy,mean_bpd,stddev_bpd")?;
        for s in &self.summaries {
            writeln!(w, "{},{},{}", s.strategy, s.mean, s.stddev)?;
        }
        Ok(())
    }
}

/// Runs every strategy across `seeds`: one pretraining per seed feeds the
/// two ranking strategies, then each plan trains a fresh model. Writes one
/// plan file and one metrics CSV per run plus the deterministic
/// `ablation.csv` and `ablation_summary.csv` into `out_dir`; progress and
/// timing go to stderr.
pub fn run_ablation(
    cfg: &TrainConfig,
    ds: &Dataset,
    seeds: &[u64],
    out_dir: impl AsRef<Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg_s = TrainConfig { seed, ..cfg.clone() };
        let started = Instant::now();
        let (pre_model, _maps) = pretrain(&cfg_s, ds)?;
        let reference = plan_reference(&cfg_s, ds)?;
        eprintln!("seed {seed}: pretraining done in {:.1}s", started.elapsed().as_secs_f64());
        for strategy in Strategy::ALL {
            let started = Instant::now();
            let plan = derive_plan(
                strategy,
                ds.layout(),
                cfg_s.scales,
                seed,
                Some((&pre_model, &reference)),
            )?;
            plan.save(out_dir.join(format!("plan-{strategy}-seed{seed}.ffplan")))?;
            let (_, metrics) = train_with_plan(&cfg_s, ds, &plan)?;
            metrics.save_csv(out_dir.join(format!("metrics-{strategy}-seed{seed}.csv")))?;
            let final_valid_bpd = metrics.final_valid_bpd()?;
            eprintln!(
                "seed {seed}: {strategy} reached {final_valid_bpd:.4} bits/dim in {:.1}s",
                started.elapsed().as_secs_f64()
            );
            rows.push(AblationRow { strategy, seed, final_valid_bpd });
        }
    }
    let summaries = Strategy::ALL
        .iter()
        .map(|&strategy| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == strategy)
                .map(|r| r.final_valid_bpd)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64
            } else {
                0.0
            };
            AblationSummary { strategy, mean, stddev: var.sqrt() }
        })
        .collect();
    let report = AblationReport { rows, summaries };
    let csv_path = out_dir.join("ablation.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::file(&csv_path, e))?;
    let mut f = std::io::BufWriter::new(f);
    report.write_csv(&mut f)?;
    f.flush()?;
    let csv_path = out_dir.join("ablation_summary.csv");
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::file(&csv_path, e))?;
    let mut f = std::io::BufWriter::new(f);
    report.write_summary_csv(&mut f)?;
    f.flush()?;
    Ok(report)
}
