//! Frozen toy Vision Transformer used as the teacher.
//!
//! Pre-LN blocks, CLIP style:
//!
//! ```text
//! a   = h + Attn(LN1(h))
//! x_ℓ = LN2(a)            <- captured CLT input
//! y_ℓ = MLP_ℓ(x_ℓ)        <- captured CLT target (GELU MLP)
//! h   = a + y_ℓ
//! ```
//!
//! After the last block the CLS row goes through a final LayerNorm and is
//! scored by cosine similarity against a fixed unit-norm class-embedding
//! matrix, a stand-in for zero-shot text embeddings. The class embeddings are
//! calibrated once at init from per-class mean embeddings of synthetic
//! images, so the baseline classifies well above chance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::store::ActivationTrace;

const LN_EPS: f32 = 1e-5;
const CALIBRATION_PER_CLASS: usize = 32;

const STREAM_WEIGHTS: u64 = 1;
const STREAM_IMAGES: u64 = 2;
const STREAM_CALIBRATION: u64 = 3;

fn default_signal() -> f32 {
    1.0
}

fn default_noise() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub layers: usize,
    /// Tokens per image including CLS.
    pub tokens: usize,
    pub hidden: usize,
    /// Defaults to `4 · hidden` when omitted.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    pub heads: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Amplitude of the class pattern added to every patch.
    #[serde(default = "default_signal")]
    pub class_signal: f32,
    /// Standard deviation of per-patch noise.
    #[serde(default = "default_noise")]
    pub patch_noise: f32,
}

impl VitConfig {
    pub fn new(
        layers: usize,
        tokens: usize,
        hidden: usize,
        heads: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            layers,
            tokens,
            hidden,
            mlp_hidden: None,
            heads,
            num_classes,
            seed,
            class_signal: default_signal(),
            patch_noise: default_noise(),
        }
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.mlp_width() == 0 {
            return fail("teacher layers, hidden, heads and mlp width must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.tokens < 2 {
            return fail(format!(
                "tokens must be >= 2 (CLS + patches), got {}",
                self.tokens
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if !(self.class_signal.is_finite()
            && self.patch_noise.is_finite()
            && self.patch_noise >= 0.0)
        {
            return fail("class_signal and patch_noise must be finite, noise >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn apply_row(&self, row: &[f32], out: &mut [f32]) {
        let d = row.len() as f32;
        let mean = row.iter().sum::<f32>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (row[i] - mean) * inv * self.scale[i] + self.bias[i];
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for t in 0..x.rows() {
            self.apply_row(x.row(t), out.row_mut(t));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitBlock {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// `[D][3D]`, columns ordered q | k | v.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f32>,
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
    pub w_fc: Matrix,
    pub b_fc: Vec<f32>,
    pub w_proj: Matrix,
    pub b_proj: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub config: VitConfig,
    pub blocks: Vec<VitBlock>,
    pub ln_final: LayerNorm,
    /// `[C][D]`, unit-norm rows.
    pub class_embeddings: Matrix,
}

/// Result of one forward pass. `x`/`y` hold what actually flowed through
/// each block, so under a hook `y` contains the substituted outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCapture {
    pub x: Vec<Matrix>,
    pub y: Vec<Matrix>,
    pub cls_embedding: Vec<f32>,
    /// Cosine similarity with each class embedding.
    pub logits: Vec<f32>,
}

impl ForwardCapture {
    pub fn into_trace(self, label: Option<u32>) -> ActivationTrace {
        ActivationTrace {
            x: self.x,
            y: self.y,
            label,
        }
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn linear(x: &Matrix, w: &Matrix, b: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for t in 0..x.rows() {
        let row = out.row_mut(t);
        row.copy_from_slice(b);
        for (k, &xv) in x.row(t).iter().enumerate() {
            axpy(xv, w.row(k), row);
        }
    }
    out
}

fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        z += *e;
    }
    for e in v.iter_mut() {
        *e /= z;
    }
}

impl VitBlock {
    fn attention(&self, h: &Matrix, heads: usize) -> Matrix {
        let (t, d) = h.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = linear(&self.ln1.apply(h), &self.w_qkv, &self.b_qkv);
        let mut mixed = Matrix::zeros(t, d);
        let mut weights = vec![0.0f32; t];
        for head in 0..heads {
            let (q0, k0, v0) = (head * dh, d + head * dh, 2 * d + head * dh);
            for i in 0..t {
                let q = &qkv.row(i)[q0..q0 + dh];
                for (j, w) in weights.iter_mut().enumerate() {
                    *w = dot(q, &qkv.row(j)[k0..k0 + dh]) * scale;
                }
                softmax_in_place(&mut weights);
                let out = &mut mixed.row_mut(i)[q0..q0 + dh];
                for (j, &w) in weights.iter().enumerate() {
                    axpy(w, &qkv.row(j)[v0..v0 + dh], out);
                }
            }
        }
        linear(&mixed, &self.w_out, &self.b_out)
    }

    fn mlp(&self, x: &Matrix) -> Matrix {
        let hidden = linear(x, &self.w_fc, &self.b_fc).map(gelu);
        linear(&hidden, &self.w_proj, &self.b_proj)
    }
}

/// Draws teacher weights and calibrates the class head.
pub fn init_teacher(config: &VitConfig) -> Result<VitParams> {
    config.validate()?;
    let (d, f) = (config.hidden, config.mlp_width());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_WEIGHTS));
    let w_dist = Normal::new(0.0f64, 1.0 / (d as f64).sqrt()).expect("valid std");
    let b_dist = Normal::new(0.0f64, 0.02).expect("valid std");

    let matrix = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| w_dist.sample(rng) as f32)
                .collect(),
        )
        .expect("sized")
    };
    let vector = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..n).map(|_| b_dist.sample(rng) as f32).collect()
    };
    let layer_norm = |rng: &mut ChaCha8Rng| LayerNorm {
        scale: (0..d)
            .map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal) as f32)
            .collect(),
        bias: (0..d)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal) as f32)
            .collect(),
    };

    let blocks = (0..config.layers)
        .map(|_| VitBlock {
            ln1: layer_norm(&mut rng),
            ln2: layer_norm(&mut rng),
            w_qkv: matrix(d, 3 * d, &mut rng),
            b_qkv: vector(3 * d, &mut rng),
            w_out: matrix(d, d, &mut rng),
            b_out: vector(d, &mut rng),
            w_fc: matrix(d, f, &mut rng),
            b_fc: vector(f, &mut rng),
            w_proj: matrix(f, d, &mut rng),
            b_proj: vector(d, &mut rng),
        })
        .collect();
    let ln_final = layer_norm(&mut rng);

    // Provisional random head; replaced by calibrated prototypes below.
    let mut class_embeddings = matrix(config.num_classes, d, &mut rng);
    normalize_rows(&mut class_embeddings);
    let mut params = VitParams {
        config: config.clone(),
        blocks,
        ln_final,
        class_embeddings,
    };
    params.calibrate_head()?;
    Ok(params)
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

impl VitParams {
    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.class_embeddings.rows()
    }

    /// `MLP_layer(x)`, token-wise.
    pub fn mlp(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        if x.cols() != self.hidden() {
            return Err(Error::shape("mlp input width", self.hidden(), x.cols()));
        }
        Ok(block.mlp(x))
    }

    /// Sets class embeddings to normalised, mean-centred per-class CLS
    /// embeddings of calibration images.
    fn calibrate_head(&mut self) -> Result<()> {
        let images = SyntheticImages::new(&self.config);
        let c = self.config.num_classes;
        let d = self.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_CALIBRATION));
        let mut means = Matrix::zeros(c, d);
        for class in 0..c {
            for _ in 0..CALIBRATION_PER_CLASS {
                let input = images.sample(class as u32, &mut rng);
                let out = self.forward_capture(&input)?;
                axpy(
                    1.0 / CALIBRATION_PER_CLASS as f32,
                    &out.cls_embedding,
                    means.row_mut(class),
                );
            }
        }
        let mut grand = vec![0.0f32; d];
        for class in 0..c {
            axpy(1.0 / c as f32, means.row(class), &mut grand);
        }
        for class in 0..c {
            axpy(-1.0, &grand, means.row_mut(class));
        }
        normalize_rows(&mut means);
        self.class_embeddings = means;
        Ok(())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.shape() != (self.config.tokens, self.hidden()) {
            return Err(Error::shape(
                "teacher input",
                format!("[{}x{}]", self.config.tokens, self.hidden()),
                format!("{:?}", input.shape()),
            ));
        }
        if !input.is_finite() {
            return Err(Error::NonFinite {
                what: "in teacher input".into(),
            });
        }
        Ok(())
    }

    /// Final LayerNorm on the CLS row, then cosine logits.
    pub fn head(&self, cls_residual: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let mut emb = vec![0.0; self.hidden()];
        self.ln_final.apply_row(cls_residual, &mut emb);
        let norm = dot(&emb, &emb).sqrt();
        let logits = self
            .class_embeddings
            .iter_rows()
            .map(|c| if norm > 0.0 { dot(&emb, c) / norm } else { 0.0 })
            .collect();
        (emb, logits)
    }

    pub fn forward_capture(&self, input: &Matrix) -> Result<ForwardCapture> {
        self.forward_with_hooks(input, &mut |_, _| Ok(None))
    }

    /// Forward pass where `hook(layer, x_ℓ)` may return a replacement for the
    /// MLP output of that layer. `None` runs the original MLP. Replaced
    /// outputs feed the residual stream, so they affect every later layer.
    pub fn forward_with_hooks(
        &self,
        input: &Matrix,
        hook: &mut dyn FnMut(usize, &Matrix) -> Result<Option<Matrix>>,
    ) -> Result<ForwardCapture> {
        self.check_input(input)?;
        let heads = self.config.heads;
        let mut h = input.clone();
        let mut xs = Vec::with_capacity(self.layers());
        let mut ys = Vec::with_capacity(self.layers());
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut a = block.attention(&h, heads);
            a.add_assign(&h)?;
            let x = block.ln2.apply(&a);
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("in teacher activations at layer {layer}"),
                });
            }
            let y = match hook(layer, &x)? {
                Some(y) => {
                    if y.shape() != x.shape() {
                        return Err(Error::shape(
                            "mlp override output",
                            format!("{:?}", x.shape()),
                            format!("{:?}", y.shape()),
                        ));
                    }
                    y
                }
                None => block.mlp(&x),
            };
            a.add_assign(&y)?;
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("in teacher residual stream at layer {layer}"),
                });
            }
            h = a;
            xs.push(x);
            ys.push(y);
        }
        let (cls_embedding, logits) = self.head(h.row(0));
        Ok(ForwardCapture {
            x: xs,
            y: ys,
            cls_embedding,
            logits,
        })
    }
}

/// Seeded synthetic "images": a constant CLS token followed by patches made
/// of Gaussian noise plus a class-specific pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImages {
    tokens: usize,
    pub cls_token: Vec<f32>,
    /// `[C][D]`.
    pub class_patterns: Matrix,
    signal: f32,
    noise: f32,
}

/// One generated image and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput {
    pub tokens: Matrix,
    pub label: u32,
}

impl SyntheticImages {
    pub fn new(config: &VitConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_IMAGES));
        let d = config.hidden;
        let mut normal = || rng.sample::<f64, _>(StandardNormal) as f32;
        let cls_token = (0..d).map(|_| normal()).collect();
        let class_patterns = Matrix::from_vec(
            config.num_classes,
            d,
            (0..config.num_classes * d).map(|_| normal()).collect(),
        )
        .expect("sized");
        Self {
            tokens: config.tokens,
            cls_token,
            class_patterns,
            signal: config.class_signal,
            noise: config.patch_noise,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_patterns.rows()
    }

    pub fn sample(&self, class: u32, rng: &mut ChaCha8Rng) -> Matrix {
        let d = self.cls_token.len();
        let mut m = Matrix::zeros(self.tokens, d);
        m.row_mut(0).copy_from_slice(&self.cls_token);
        let pattern = self.class_patterns.row(class as usize);
        for t in 1..self.tokens {
            for (i, v) in m.row_mut(t).iter_mut().enumerate() {
                let n: f64 = rng.sample(StandardNormal);
                *v = self.noise * n as f32 + self.signal * pattern[i];
            }
        }
        m
    }

    /// Sample `index` of the dataset identified by `seed`. Each sample has its
    /// own stream, so any subset can be regenerated independently.
    pub fn indexed(&self, seed: u64, index: usize) -> LabeledInput {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
        let label = rng.random_range(0..self.num_classes() as u32);
        LabeledInput {
            tokens: self.sample(label, &mut rng),
            label,
        }
    }

    pub fn dataset(&self, seed: u64, n: usize) -> Vec<LabeledInput> {
        (0..n).map(|i| self.indexed(seed, i)).collect()
    }
}
