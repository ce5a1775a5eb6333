//! CLT training: loss, hand-derived gradients, AdamW and the epoch loop.
//!
//! The per-batch objective is
//!
//! ```text
//! loss = (1/B) Σ_b Σ_ℓ Σ_t ‖ŷ_ℓ − y_ℓ‖²  +  λ Σ_ℓ mean_{b,t,f} tanh(c · ‖W_f^(ℓ)‖ · |z_ℓ,f|)
//! ```
//!
//! where `‖W_f^(ℓ)‖` is the norm of the concatenated decoder rows reading
//! feature `f` of layer `ℓ` (active decoders only).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_checkpoint;
use crate::clt::{decode_transposed_into, decoder_index, CltParams};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix, MetricAccumulator, MetricReport, Real};
use crate::sparsify::{backward_into, gradient_support};
use crate::store::{permutation, ActivationTrace};

/// Samples per gradient-accumulation chunk. Fixed so that the reduction
/// order, and therefore the result, does not depend on the thread count.
const CHUNK: usize = 8;

fn default_lr() -> f64 {
    2e-4
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_lambda() -> f64 {
    3e-4
}
fn default_sharpness() -> f64 {
    4.0
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
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Sparsity weight λ.
    #[serde(default = "default_lambda")]
    pub sparsity_coeff: f64,
    /// tanh sharpness c.
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled decay, applied to encoder and decoder matrices only.
    #[serde(default)]
    pub weight_decay: f64,
    /// Shuffling seed. Not read from config files; run configs derive it.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            sparsity_coeff: default_lambda(),
            sharpness: default_sharpness(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be > 0");
        }
        if !(self.sparsity_coeff >= 0.0 && self.sparsity_coeff.is_finite()) {
            return fail("sparsity_coeff must be >= 0");
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return fail("sharpness must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Gradients with the same layout as [`CltParams`]. Decoders of inactive
/// pairs stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CltGradients<T = f32> {
    pub encoders: Vec<Matrix<T>>,
    pub enc_biases: Vec<Vec<T>>,
    pub thresholds: Vec<Vec<T>>,
    pub decoders: Vec<Matrix<T>>,
}

impl<T: Real> CltGradients<T> {
    pub fn zeros_like(p: &CltParams<T>) -> Self {
        let (l, d, m) = (p.layers(), p.hidden(), p.features());
        Self {
            encoders: vec![Matrix::zeros(d, m); l],
            enc_biases: vec![vec![T::zero(); m]; l],
            thresholds: vec![vec![T::zero(); m]; l],
            decoders: vec![Matrix::zeros(m, d); p.decoders.len()],
        }
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.encoders
            .iter_mut()
            .map(|m| m.as_mut_slice())
            .chain(self.enc_biases.iter_mut().map(|v| v.as_mut_slice()))
            .chain(self.thresholds.iter_mut().map(|v| v.as_mut_slice()))
            .chain(self.decoders.iter_mut().map(|m| m.as_mut_slice()))
    }

    fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.encoders
            .iter()
            .map(|m| m.as_slice())
            .chain(self.enc_biases.iter().map(|v| v.as_slice()))
            .chain(self.thresholds.iter().map(|v| v.as_slice()))
            .chain(self.decoders.iter().map(|m| m.as_slice()))
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Loss value split into its terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Per layer: `Σ_t ‖ŷ_ℓ − y_ℓ‖²`, averaged over the batch.
    pub reconstruction: Vec<f64>,
    /// Per layer: unweighted penalty `mean_{b,t,f} tanh(c ‖W_f‖ |z|)`.
    pub sparsity: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Partial<T> {
    grads: CltGradients<T>,
    norm_grads: Vec<Vec<T>>,
    sq_err: Vec<f64>,
    penalty: Vec<f64>,
    nonzero: Vec<usize>,
}

impl<T: Real> Partial<T> {
    fn new(p: &CltParams<T>) -> Self {
        let l = p.layers();
        Self {
            grads: CltGradients::zeros_like(p),
            norm_grads: vec![vec![T::zero(); p.features()]; l],
            sq_err: vec![0.0; l],
            penalty: vec![0.0; l],
            nonzero: vec![0; l],
        }
    }

    fn merge(&mut self, other: &Self) {
        self.grads.add_assign(&other.grads);
        for (a, b) in self.norm_grads.iter_mut().zip(&other.norm_grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        for l in 0..self.sq_err.len() {
            self.sq_err[l] += other.sq_err[l];
            self.penalty[l] += other.penalty[l];
            self.nonzero[l] += other.nonzero[l];
        }
    }
}

struct Coefficients<T> {
    /// `2/B`, derivative of the batch-mean squared error.
    residual: T,
    /// `λ / (B·T·m)`.
    penalty: T,
    sharpness: T,
    with_penalty_grad: bool,
}

/// Adds one sample's gradient into `acc`.
fn accumulate_sample<T: Real>(
    p: &CltParams<T>,
    norms: &[Vec<T>],
    trace: &ActivationTrace<T>,
    coef: &Coefficients<T>,
    targets: &[bool],
    acc: &mut Partial<T>,
    scratch: &mut Vec<usize>,
) {
    let (l, d, m) = (p.layers(), p.hidden(), p.features());
    let tokens = trace.x[0].rows();
    let spec = &p.sparsifier;

    let mut us = Vec::with_capacity(l);
    let mut zs = Vec::with_capacity(l);
    for i in 0..l {
        let u = p.preactivations_unchecked(i, &trace.x[i]);
        zs.push(p.sparsify_unchecked(i, &u));
        us.push(u);
    }

    // Codes transposed to [m][T] so each decoder row is reused across tokens.
    let zts: Vec<Matrix<T>> = zs.iter().map(Matrix::transpose).collect();

    // g_j = (2/B)(ŷ_j − y_j), zero for masked targets.
    let mut g = Vec::with_capacity(l);
    for j in 0..l {
        let mut r = Matrix::zeros(tokens, d);
        if targets[j] {
            for i in 0..=j {
                if p.is_active(i, j) {
                    decode_transposed_into(&zts[i], p.decoder(i, j), &mut r);
                }
            }
            let mut sq = 0.0;
            for (a, &b) in r.as_mut_slice().iter_mut().zip(trace.y[j].as_slice()) {
                *a = *a - b;
                sq += (*a * *a).as_f64();
            }
            acc.sq_err[j] += sq;
            r.scale(coef.residual);
        }
        g.push(r);
    }

    for i in 0..l {
        for j in i..l {
            if !p.is_active(i, j) || !targets[j] {
                continue;
            }
            let gw = &mut acc.grads.decoders[decoder_index(l, i, j)];
            for f in 0..m {
                let zc = zts[i].row(f);
                let row = gw.row_mut(f);
                for (t, &zv) in zc.iter().enumerate() {
                    if zv != T::zero() {
                        axpy(zv, g[j].row(t), row);
                    }
                }
            }
        }
    }

    let mut supports = vec![Vec::new(); tokens];
    let mut mask = vec![false; m * tokens];
    let mut up = Matrix::zeros(tokens, m);
    let mut grad_u = vec![T::zero(); m];
    let one = T::one();
    for i in 0..l {
        let tau = p.thresholds[i].as_slice();
        mask.fill(false);
        for (t, sup) in supports.iter_mut().enumerate() {
            gradient_support(spec, us[i].row(t), Some(tau), sup);
            for &f in sup.iter() {
                mask[f * tokens + t] = true;
            }
        }
        // Upstream gradient wrt z on the support, summed over targets.
        up.as_mut_slice().fill(T::zero());
        for j in i..l {
            if !p.is_active(i, j) || !targets[j] {
                continue;
            }
            let w = p.decoder(i, j);
            for f in 0..m {
                let wf = w.row(f);
                for t in 0..tokens {
                    if mask[f * tokens + t] {
                        let cell = &mut up.row_mut(t)[f];
                        *cell = *cell + dot(g[j].row(t), wf);
                    }
                }
            }
        }
        for t in 0..tokens {
            let u = us[i].row(t);
            let z = zs[i].row(t);
            let support = &supports[t];
            let upstream = up.row_mut(t);
            for &f in support {
                let zv = z[f];
                if zv == T::zero() {
                    continue;
                }
                let n = norms[i][f];
                let th = (coef.sharpness * n * zv.abs()).tanh();
                acc.penalty[i] += th.as_f64();
                acc.nonzero[i] += 1;
                if coef.with_penalty_grad {
                    let sech2 = one - th * th;
                    upstream[f] =
                        upstream[f] + coef.penalty * coef.sharpness * n * sech2 * zv.signum();
                    acc.norm_grads[i][f] =
                        acc.norm_grads[i][f] + coef.penalty * coef.sharpness * zv.abs() * sech2;
                }
            }
            let grad_tau = spec
                .uses_thresholds()
                .then(|| acc.grads.thresholds[i].as_mut_slice());
            backward_into(spec, u, Some(tau), upstream, &mut grad_u, grad_tau, scratch);

            let x = trace.x[i].row(t);
            let enc = &mut acc.grads.encoders[i];
            let bias = &mut acc.grads.enc_biases[i];
            if support.len() * 4 >= m {
                for &f in support {
                    bias[f] = bias[f] + grad_u[f];
                }
                for (dd, &xv) in x.iter().enumerate() {
                    axpy(xv, &grad_u, enc.row_mut(dd));
                }
                continue;
            }
            for &f in support {
                let gu = grad_u[f];
                if gu == T::zero() {
                    continue;
                }
                bias[f] = bias[f] + gu;
                for (dd, &xv) in x.iter().enumerate() {
                    let cell = &mut enc.row_mut(dd)[f];
                    *cell = *cell + xv * gu;
                }
            }
        }
    }
}

fn check_batch<T: Real>(p: &CltParams<T>, batch: &[&ActivationTrace<T>]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let tokens = first.x.first().map(|x| x.rows()).unwrap_or(0);
    for s in batch {
        if s.x.len() != p.layers() || s.y.len() != p.layers() {
            return Err(Error::shape("trace layers", p.layers(), s.x.len()));
        }
        for m in s.x.iter().chain(&s.y) {
            if m.shape() != (tokens, p.hidden()) {
                return Err(Error::shape(
                    "trace block",
                    format!("[{tokens}x{}]", p.hidden()),
                    format!("{:?}", m.shape()),
                ));
            }
        }
    }
    Ok(tokens)
}

struct BatchResult<T> {
    terms: LossTerms,
    grads: CltGradients<T>,
    nonzero: Vec<usize>,
}

fn batch_gradients<T: Real>(
    p: &CltParams<T>,
    batch: &[&ActivationTrace<T>],
    cfg: &TrainConfig,
    targets: &[bool],
) -> Result<BatchResult<T>> {
    let tokens = check_batch(p, batch)?;
    if targets.len() != p.layers() {
        return Err(Error::shape("target mask", p.layers(), targets.len()));
    }
    let b = batch.len() as f64;
    let coef = Coefficients {
        residual: T::of_f64(2.0 / b),
        penalty: T::of_f64(cfg.sparsity_coeff / (b * (tokens * p.features()) as f64)),
        sharpness: T::of_f64(cfg.sharpness),
        with_penalty_grad: cfg.sparsity_coeff > 0.0,
    };
    let norms = p.decoder_norms();

    let partials: Vec<Partial<T>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial::new(p);
            let mut scratch = Vec::new();
            for s in chunk {
                accumulate_sample(p, &norms, s, &coef, targets, &mut acc, &mut scratch);
            }
            acc
        })
        .collect();
    let mut parts = partials.into_iter();
    let mut total = parts.next().expect("non-empty batch");
    for part in parts {
        total.merge(&part);
    }

    // Penalty gradient through the decoder norms: d‖w‖/dw = w/‖w‖, 0 at 0.
    let l = p.layers();
    for i in 0..l {
        for (f, &gn) in total.norm_grads[i].iter().enumerate() {
            let n = norms[i][f];
            if gn == T::zero() || n == T::zero() {
                continue;
            }
            for j in i..l {
                if p.is_active(i, j) {
                    let k = decoder_index(l, i, j);
                    axpy(
                        gn / n,
                        p.decoders[k].row(f),
                        total.grads.decoders[k].row_mut(f),
                    );
                }
            }
        }
    }

    let denom = b * (tokens * p.features()) as f64;
    let reconstruction: Vec<f64> = total.sq_err.iter().map(|s| s / b).collect();
    let sparsity: Vec<f64> = total.penalty.iter().map(|s| s / denom).collect();
    let total_loss =
        reconstruction.iter().sum::<f64>() + cfg.sparsity_coeff * sparsity.iter().sum::<f64>();
    Ok(BatchResult {
        terms: LossTerms {
            total: total_loss,
            reconstruction,
            sparsity,
        },
        grads: total.grads,
        nonzero: total.nonzero,
    })
}

/// Loss terms for a batch.
pub fn loss<T: Real>(
    p: &CltParams<T>,
    batch: &[ActivationTrace<T>],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    Ok(backward(p, batch, cfg)?.0)
}

/// Loss terms and exact gradients for a batch.
pub fn backward<T: Real>(
    p: &CltParams<T>,
    batch: &[ActivationTrace<T>],
    cfg: &TrainConfig,
) -> Result<(LossTerms, CltGradients<T>)> {
    backward_masked(p, batch, cfg, &vec![true; p.layers()])
}

/// As [`backward`], with the reconstruction term restricted to the target
/// layers flagged in `targets`. The sparsity term is unaffected.
pub fn backward_masked<T: Real>(
    p: &CltParams<T>,
    batch: &[ActivationTrace<T>],
    cfg: &TrainConfig,
    targets: &[bool],
) -> Result<(LossTerms, CltGradients<T>)> {
    let refs: Vec<&ActivationTrace<T>> = batch.iter().collect();
    let r = batch_gradients(p, &refs, cfg, targets)?;
    Ok((r.terms, r.grads))
}

/// AdamW moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T = f32> {
    pub first: CltGradients<T>,
    pub second: CltGradients<T>,
    pub step: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(p: &CltParams<T>) -> Self {
        Self {
            first: CltGradients::zeros_like(p),
            second: CltGradients::zeros_like(p),
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::of_f64(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of_f64(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::of_f64(cfg.lr);
    let eps = T::of_f64(cfg.eps);
    let wd = T::of_f64(if decay { cfg.weight_decay } else { 0.0 });
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * param[i]);
    }
}

/// Applies one AdamW step to every tensor, then clamps thresholds at zero.
pub fn adamw_step<T: Real>(
    p: &mut CltParams<T>,
    grads: &CltGradients<T>,
    state: &mut OptState<T>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let step = state.step;
    let (first, second) = (&mut state.first, &mut state.second);
    for i in 0..p.layers() {
        adamw_update(
            p.encoders[i].as_mut_slice(),
            grads.encoders[i].as_slice(),
            first.encoders[i].as_mut_slice(),
            second.encoders[i].as_mut_slice(),
            step,
            cfg,
            true,
        );
        adamw_update(
            &mut p.enc_biases[i],
            &grads.enc_biases[i],
            &mut first.enc_biases[i],
            &mut second.enc_biases[i],
            step,
            cfg,
            false,
        );
        if p.sparsifier.uses_thresholds() {
            adamw_update(
                &mut p.thresholds[i],
                &grads.thresholds[i],
                &mut first.thresholds[i],
                &mut second.thresholds[i],
                step,
                cfg,
                false,
            );
            for t in p.thresholds[i].iter_mut() {
                *t = t.max(T::zero());
            }
        }
    }
    let l = p.layers();
    for i in 0..l {
        for j in i..l {
            if !p.is_active(i, j) {
                continue;
            }
            let k = decoder_index(l, i, j);
            adamw_update(
                p.decoders[k].as_mut_slice(),
                grads.decoders[k].as_slice(),
                first.decoders[k].as_mut_slice(),
                second.decoders[k].as_mut_slice(),
                step,
                cfg,
                true,
            );
        }
    }
}

/// Per-layer reconstruction metrics of `p` on `traces`, teacher-forced.
pub fn evaluate(p: &CltParams, traces: &[ActivationTrace]) -> Result<Vec<MetricReport>> {
    let mut accs = vec![MetricAccumulator::new(p.hidden()); p.layers()];
    for trace in traces {
        let codes = p.encode(&trace.x)?;
        for (j, acc) in accs.iter_mut().enumerate() {
            acc.push(&p.reconstruct(&codes, j)?, &trace.y[j])?;
        }
    }
    accs.iter().map(MetricAccumulator::finish).collect()
}

/// Layer-averaged R² and cosine.
pub fn layer_average(reports: &[MetricReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.r2).sum::<f64>() / n,
        reports.iter().map(|r| r.cosine).sum::<f64>() / n,
    )
}

/// Where training writes its artifacts. Both are rewritten every epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Per layer, mean squared error per element over the epoch.
    pub layer_mse: Vec<f64>,
    /// Per layer, mean number of nonzero codes per token.
    pub layer_l0: Vec<f64>,
    /// Per layer validation metrics, when a validation set is given.
    pub validation: Option<Vec<MetricReport>>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: CltParams,
    pub history: Vec<EpochRecord>,
}

fn csv_header(layers: usize, with_val: bool) -> String {
    let mut cols = vec!["epoch".to_string(), "loss".to_string()];
    cols.extend((0..layers).map(|l| format!("mse_{l}")));
    cols.extend((0..layers).map(|l| format!("l0_{l}")));
    if with_val {
        cols.push("val_r2".into());
        cols.push("val_cosine".into());
    }
    cols.join(",")
}

fn csv_row(r: &EpochRecord) -> String {
    let mut cols = vec![r.epoch.to_string(), format!("{:.9e}", r.loss)];
    cols.extend(r.layer_mse.iter().map(|v| format!("{v:.9e}")));
    cols.extend(r.layer_l0.iter().map(|v| format!("{v:.6}")));
    if let Some(val) = &r.validation {
        let (r2, cos) = layer_average(val);
        cols.push(format!("{r2:.9}"));
        cols.push(format!("{cos:.9}"));
    }
    cols.join(",")
}

/// Teacher-forced training over in-memory traces.
pub fn train(
    init: CltParams,
    train_set: &[ActivationTrace],
    val_set: &[ActivationTrace],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    cfg.validate()?;
    init.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut params = init;
    let mut state = OptState::new(&params);
    let targets = vec![true; params.layers()];
    let tokens = train_set[0].x.first().map(|x| x.rows()).unwrap_or(0);
    let mut log = match &outputs.log {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", csv_header(params.layers(), !val_set.is_empty()))
                .map_err(|e| Error::io(path, e))?;
            Some((path, w))
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(train_set.len(), derive_seed(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut sq = vec![0.0; params.layers()];
        let mut nonzero = vec![0usize; params.layers()];
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&ActivationTrace> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let r = batch_gradients(&params, &batch, cfg, &targets)?;
            if !r.terms.total.is_finite() || !r.grads.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss at step {}", state.step + 1),
                });
            }
            let b = batch.len() as f64;
            loss_sum += r.terms.total * b;
            for l in 0..params.layers() {
                sq[l] += r.terms.reconstruction[l] * b;
                nonzero[l] += r.nonzero[l];
            }
            adamw_step(&mut params, &r.grads, &mut state, cfg);
        }
        let n = train_set.len() as f64;
        let token_count = n * tokens as f64;
        let validation = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&params, val_set)?)
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            layer_mse: sq
                .iter()
                .map(|s| s / (token_count * params.hidden() as f64))
                .collect(),
            layer_l0: nonzero.iter().map(|&c| c as f64 / token_count).collect(),
            validation,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} l0 {:?}",
            record.loss,
            record.layer_l0
        );
        if let Some(path) = &outputs.checkpoint {
            write_checkpoint(path, &params)?;
        }
        if let Some((path, w)) = &mut log {
            writeln!(w, "{}", csv_row(&record))
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(record);
    }
    Ok(TrainResult { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clt::init_clt;
    use crate::clt::tests::random_inputs;
    use crate::sparsify::SparsifierSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize, l: usize, t: usize, d: usize) -> Vec<ActivationTrace<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ActivationTrace {
                x: random_inputs(&mut rng, l, t, d)
                    .iter()
                    .map(Matrix::cast)
                    .collect(),
                y: random_inputs(&mut rng, l, t, d)
                    .iter()
                    .map(Matrix::cast)
                    .collect(),
                label: None,
            })
            .collect()
    }

    fn cfg(lambda: f64) -> TrainConfig {
        TrainConfig {
            sparsity_coeff: lambda,
            sharpness: 1.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let p: CltParams<f64> = init_clt(2, 3, 2, SparsifierSpec::identity(), 1)
            .unwrap()
            .cast();
        let mut data = batch(2, 3, 2, 2, 3);
        for s in &mut data {
            let codes = p.encode(&s.x).unwrap();
            s.y = p.reconstruct_all(&codes).unwrap();
        }
        let terms = loss(&p, &data, &cfg(0.0)).unwrap();
        assert!(terms.total.abs() < 1e-24);
    }

    #[test]
    fn zero_codes_have_zero_penalty_and_decoder_grad() {
        let mut p: CltParams<f64> = init_clt(2, 3, 2, SparsifierSpec::jump_relu(1e-3), 1)
            .unwrap()
            .cast();
        for t in &mut p.thresholds {
            t.fill(1e6);
        }
        let data = batch(3, 2, 2, 2, 3);
        let (terms, grads) = backward(&p, &data, &cfg(1.0)).unwrap();
        assert!(terms.sparsity.iter().all(|&s| s == 0.0));
        assert!(grads
            .decoders
            .iter()
            .all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_feature_penalty() {
        // One layer, one feature, decoder row of norm 2, z = 0.5, c = 1.
        let one_feature = CltParams::from_parts(
            1,
            2,
            1,
            SparsifierSpec::identity(),
            false,
            vec![Matrix::from_rows(&[[0.5], [0.0]]).unwrap()],
            vec![vec![0.0]],
            vec![vec![0.0]],
            vec![Matrix::from_rows(&[[2.0, 0.0]]).unwrap()],
        )
        .unwrap();
        let sample = ActivationTrace {
            x: vec![Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()],
            y: vec![Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()],
            label: None,
        };
        let c = TrainConfig {
            sparsity_coeff: 1.0,
            sharpness: 1.0,
            ..TrainConfig::default()
        };
        let terms = loss(&one_feature, &[sample], &c).unwrap();
        assert!((terms.sparsity[0] - 1f64.tanh()).abs() < 1e-12);
        assert!((terms.sparsity[0] - 0.7616).abs() < 1e-4);
        assert!(terms.reconstruction[0].abs() < 1e-24);
    }

    /// Central finite differences over every parameter of a small f64 model.
    fn check_gradients(
        p: &CltParams<f64>,
        data: &[ActivationTrace<f64>],
        c: &TrainConfig,
        tol: f64,
        skip_tau: bool,
    ) {
        let (_, grads) = backward(p, data, c).unwrap();
        let h = 1e-6;
        let eval = |q: &CltParams<f64>| loss(q, data, c).unwrap().total;
        let mut worst = 0.0f64;
        let mut check = |analytic: f64, get: &dyn Fn(&mut CltParams<f64>) -> &mut f64| {
            let mut plus = p.clone();
            *get(&mut plus) += h;
            let mut minus = p.clone();
            *get(&mut minus) -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel < tol, "analytic {analytic} numeric {numeric} rel {rel}");
        };
        let (l, d, m) = (p.layers(), p.hidden(), p.features());
        for i in 0..l {
            for r in 0..d {
                for f in 0..m {
                    check(grads.encoders[i].get(r, f), &|q| {
                        &mut q.encoders[i].as_mut_slice()[r * m + f]
                    });
                }
            }
            for f in 0..m {
                check(grads.enc_biases[i][f], &|q| &mut q.enc_biases[i][f]);
                if !skip_tau {
                    check(grads.thresholds[i][f], &|q| &mut q.thresholds[i][f]);
                }
            }
        }
        for k in 0..p.decoders.len() {
            for e in 0..m * d {
                check(grads.decoders[k].as_slice()[e], &|q| {
                    &mut q.decoders[k].as_mut_slice()[e]
                });
            }
        }
        assert!(worst < tol);
    }

    #[test]
    fn gradients_match_finite_differences_identity() {
        let mut p: CltParams<f64> = init_clt(2, 3, 1, SparsifierSpec::identity(), 4)
            .unwrap()
            .cast();
        // m = 5 features.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        p = widen(p, 5, &mut rng);
        let data = batch(5, 2, 2, 2, 3);
        for lambda in [0.0, 0.3] {
            check_gradients(&p, &data, &cfg(lambda), 1e-5, false);
        }
    }

    /// Random f64 model with `m` features and random biases.
    fn widen(p: CltParams<f64>, m: usize, rng: &mut ChaCha8Rng) -> CltParams<f64> {
        use rand::Rng;
        let (l, d) = (p.layers(), p.hidden());
        let mut mat = |r: usize, c: usize| {
            Matrix::from_vec(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-0.8..0.8)).collect(),
            )
            .unwrap()
        };
        let encoders = (0..l).map(|_| mat(d, m)).collect();
        let decoders = (0..p.decoders.len()).map(|_| mat(m, d)).collect();
        let biases = (0..l).map(|_| mat(1, m).into_vec()).collect();
        CltParams::from_parts(
            l,
            d,
            m,
            p.sparsifier,
            false,
            encoders,
            biases,
            vec![vec![0.1; m]; l],
            decoders,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_jump_relu() {
        let p: CltParams<f64> = init_clt(2, 3, 1, SparsifierSpec::jump_relu(1e-3), 4)
            .unwrap()
            .cast();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = widen(p, 5, &mut rng);
        let data = batch(6, 2, 2, 2, 3);
        // Every pre-activation must be clear of the band for the value path.
        for s in &data {
            for i in 0..2 {
                let u = p.preactivations(i, &s.x[i]).unwrap();
                for (f, &v) in u.as_slice().iter().enumerate() {
                    assert!((v - p.thresholds[i][f % 5]).abs() > 1e-2);
                }
            }
        }
        for lambda in [0.0, 0.3] {
            check_gradients(&p, &data, &cfg(lambda), 1e-4, true);
        }
        let (_, grads) = backward(&p, &data, &cfg(0.3)).unwrap();
        assert!(grads.thresholds.iter().all(|t| t.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn masked_target_gradient_is_causal() {
        let p: CltParams<f64> = init_clt(3, 3, 2, SparsifierSpec::identity(), 4)
            .unwrap()
            .cast();
        let data = batch(7, 2, 3, 2, 3);
        for j in 0..3 {
            let mut mask = vec![false; 3];
            mask[j] = true;
            let (_, g) = backward_masked(&p, &data, &cfg(0.0), &mask).unwrap();
            for i in j + 1..3 {
                assert!(g.encoders[i].as_slice().iter().all(|&v| v == 0.0));
                assert!(g.enc_biases[i].iter().all(|&v| v == 0.0));
            }
            for i in 0..=j {
                assert!(g.encoders[i].as_slice().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn adamw_cases() {
        let c = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let (mut p, mut m, mut v) = ([1.5f64], [0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, &c, true);
        assert!((p[0] - (1.5 - 0.1)).abs() < 1e-6);

        let (mut p, mut m, mut v) = ([1.5f64, -2.0], [0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &c, true);
        assert_eq!(p, [1.5, -2.0]);

        let decay = TrainConfig {
            weight_decay: 0.1,
            ..c
        };
        let (mut p, mut m, mut v) = ([2.0f64], [0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, &decay, true);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn adamw_step_clamps_thresholds() {
        let mut p = init_clt(1, 2, 2, SparsifierSpec::jump_relu(1e-3), 0).unwrap();
        let mut g = CltGradients::zeros_like(&p);
        g.thresholds[0].fill(10.0);
        let mut state = OptState::new(&p);
        let c = TrainConfig {
            lr: 1.0,
            ..TrainConfig::default()
        };
        adamw_step(&mut p, &g, &mut state, &c);
        assert!(p.thresholds[0].iter().all(|&t| t == 0.0));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_step_is_fixed_point() {
        let mut p = init_clt(2, 2, 2, SparsifierSpec::relu_top_k(2), 0).unwrap();
        let before = p.clone();
        let g = CltGradients::zeros_like(&p);
        let mut state = OptState::new(&p);
        adamw_step(&mut p, &g, &mut state, &TrainConfig::default());
        assert_eq!(p.encoders, before.encoders);
        assert_eq!(p.decoders, before.decoders);
    }

    #[test]
    fn penalty_is_monotone() {
        let base: CltParams<f64> = init_clt(1, 2, 2, SparsifierSpec::identity(), 3)
            .unwrap()
            .cast();
        let data = batch(1, 1, 1, 2, 2);
        let c = cfg(1.0);
        let r0 = loss(&base, &data, &c).unwrap().sparsity[0];
        let mut bigger = base.clone();
        bigger.decoders[0].scale(2.0);
        assert!(loss(&bigger, &data, &c).unwrap().sparsity[0] >= r0);
        let mut louder = base.clone();
        louder.encoders[0].scale(2.0);
        assert!(loss(&louder, &data, &c).unwrap().sparsity[0] >= r0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                sparsity_coeff: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                sharpness: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn non_finite_data_aborts_with_step() {
        let p = init_clt(1, 2, 2, SparsifierSpec::identity(), 0).unwrap();
        let mut data: Vec<ActivationTrace> =
            batch(1, 2, 1, 2, 2).iter().map(|t| t.cast()).collect();
        data[1].y[0].set(0, 0, f32::INFINITY);
        let c = TrainConfig {
            batch_size: 1,
            seed: 0,
            ..TrainConfig::default()
        };
        let err = train(p, &data, &[], &c, &TrainOutputs::default()).unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }
}
