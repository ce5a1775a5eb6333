//! Cross-layer transcoder parameters and forward semantics.
//!
//! Layer `i` encodes its pre-MLP activations into sparse codes
//! `z_i = φ(x_i E_i + b_i)`. Target layer `j` is reconstructed additively
//! from every source `i ≤ j` through its own decoder `W[i→j]`:
//!
//! ```text
//! ŷ_j = Σ_{i ≤ j} z_i W[i→j]
//! ```
//!
//! Decoders are stored as one triangle, source-major (`i` outer, `j` inner).
//! With `diagonal_only` set only `W[j→j]` participates, which is a plain
//! per-layer transcoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, Real};
use crate::sparsify::{self, SparsifierSpec};

pub const DEFAULT_EXPANSION: usize = 16;
pub const INITIAL_THRESHOLD: f64 = 0.03;

/// Number of decoders in a triangular bank over `layers` layers.
pub fn triangle_len(layers: usize) -> usize {
    layers * (layers + 1) / 2
}

/// Position of `W[source→target]` in the source-major triangle.
pub fn decoder_index(layers: usize, source: usize, target: usize) -> usize {
    debug_assert!(source <= target && target < layers);
    source * layers - source * source.saturating_sub(1) / 2 + (target - source)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CltParams<T = f32> {
    layers: usize,
    hidden: usize,
    features: usize,
    pub sparsifier: SparsifierSpec,
    diagonal_only: bool,
    /// `[D][m]` per layer.
    pub encoders: Vec<Matrix<T>>,
    /// `[m]` per layer.
    pub enc_biases: Vec<Vec<T>>,
    /// `[m]` per layer. Read only by JumpReLU but always present.
    pub thresholds: Vec<Vec<T>>,
    /// `[m][D]` triangle, see [`decoder_index`].
    pub decoders: Vec<Matrix<T>>,
}

/// Per-layer, per-token sparse codes: `[L]` matrices of shape `T × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCodes<T = f32> {
    pub layers: Vec<Matrix<T>>,
}

impl<T: Real> SparseCodes<T> {
    /// Mean number of nonzero codes per token at `layer`.
    pub fn mean_l0(&self, layer: usize) -> f64 {
        let z = &self.layers[layer];
        let nnz = z.as_slice().iter().filter(|v| **v != T::zero()).count();
        nnz as f64 / z.rows().max(1) as f64
    }
}

pub fn init_clt(
    layers: usize,
    hidden: usize,
    expansion: usize,
    sparsifier: SparsifierSpec,
    seed: u64,
) -> Result<CltParams<f32>> {
    if layers == 0 || hidden == 0 || expansion == 0 {
        return Err(Error::InvalidArgument(format!(
            "CLT dims must be positive (L={layers}, D={hidden}, expansion={expansion})"
        )));
    }
    let features = expansion * hidden;
    sparsifier.validate(features)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc_dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid std");
    let dec_dist = Normal::new(0.0, 1.0 / ((features * layers) as f64).sqrt()).expect("valid std");
    let mut draw = |rows, cols, dist: &Normal<f64>| {
        let data = (0..rows * cols)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized")
    };

    let encoders = (0..layers)
        .map(|_| draw(hidden, features, &enc_dist))
        .collect();
    let decoders = (0..triangle_len(layers))
        .map(|_| draw(features, hidden, &dec_dist))
        .collect();
    Ok(CltParams {
        layers,
        hidden,
        features,
        sparsifier,
        diagonal_only: false,
        encoders,
        enc_biases: vec![vec![0.0; features]; layers],
        thresholds: vec![vec![INITIAL_THRESHOLD as f32; features]; layers],
        decoders,
    })
}

impl<T: Real> CltParams<T> {
    /// Assembles parameters from raw parts, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layers: usize,
        hidden: usize,
        features: usize,
        sparsifier: SparsifierSpec,
        diagonal_only: bool,
        encoders: Vec<Matrix<T>>,
        enc_biases: Vec<Vec<T>>,
        thresholds: Vec<Vec<T>>,
        decoders: Vec<Matrix<T>>,
    ) -> Result<Self> {
        let params = Self {
            layers,
            hidden,
            features,
            sparsifier,
            diagonal_only,
            encoders,
            enc_biases,
            thresholds,
            decoders,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, d, m) = (self.layers, self.hidden, self.features);
        if l == 0 || d == 0 || m == 0 {
            return Err(Error::InvalidArgument("CLT dims must be positive".into()));
        }
        self.sparsifier.validate(m)?;
        if self.encoders.len() != l || self.encoders.iter().any(|e| e.shape() != (d, m)) {
            return Err(Error::shape(
                "CLT encoders",
                format!("{l} x [{d}x{m}]"),
                "other",
            ));
        }
        let vec_ok = |v: &Vec<Vec<T>>| v.len() == l && v.iter().all(|b| b.len() == m);
        if !vec_ok(&self.enc_biases) || !vec_ok(&self.thresholds) {
            return Err(Error::shape(
                "CLT biases/thresholds",
                format!("{l} x [{m}]"),
                "other",
            ));
        }
        if self.decoders.len() != triangle_len(l)
            || self.decoders.iter().any(|w| w.shape() != (m, d))
        {
            return Err(Error::shape(
                "CLT decoders",
                format!("{} x [{m}x{d}]", triangle_len(l)),
                "other",
            ));
        }
        let finite = self
            .encoders
            .iter()
            .chain(&self.decoders)
            .all(Matrix::is_finite)
            && self
                .enc_biases
                .iter()
                .chain(&self.thresholds)
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite {
                what: "in CLT parameters".into(),
            });
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn diagonal_only(&self) -> bool {
        self.diagonal_only
    }

    /// Restricts the bank to same-layer decoders. Off-diagonal decoders are
    /// zeroed so the stored bank matches what the model computes.
    pub fn into_diagonal_only(mut self) -> Self {
        self.diagonal_only = true;
        for i in 0..self.layers {
            for j in i + 1..self.layers {
                let idx = decoder_index(self.layers, i, j);
                self.decoders[idx].as_mut_slice().fill(T::zero());
            }
        }
        self
    }

    /// Whether `W[source→target]` participates in reconstruction.
    #[inline]
    pub fn is_active(&self, source: usize, target: usize) -> bool {
        source <= target && (!self.diagonal_only || source == target)
    }

    #[inline]
    pub fn decoder(&self, source: usize, target: usize) -> &Matrix<T> {
        &self.decoders[decoder_index(self.layers, source, target)]
    }

    #[inline]
    pub fn decoder_mut(&mut self, source: usize, target: usize) -> &mut Matrix<T> {
        let idx = decoder_index(self.layers, source, target);
        &mut self.decoders[idx]
    }

    pub fn cast<U: Real>(&self) -> CltParams<U> {
        let vecs = |v: &Vec<Vec<T>>| {
            v.iter()
                .map(|b| b.iter().map(|x| U::of_f64(x.as_f64())).collect())
                .collect()
        };
        CltParams {
            layers: self.layers,
            hidden: self.hidden,
            features: self.features,
            sparsifier: self.sparsifier,
            diagonal_only: self.diagonal_only,
            encoders: self.encoders.iter().map(Matrix::cast).collect(),
            enc_biases: vecs(&self.enc_biases),
            thresholds: vecs(&self.thresholds),
            decoders: self.decoders.iter().map(Matrix::cast).collect(),
        }
    }

    fn check_layer_input(&self, layer: usize, x: &Matrix<T>) -> Result<()> {
        if layer >= self.layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for {} layers",
                self.layers
            )));
        }
        if x.cols() != self.hidden {
            return Err(Error::shape("CLT layer input width", self.hidden, x.cols()));
        }
        Ok(())
    }

    /// Pre-activations `u = x E_i + b_i` for one layer.
    pub fn preactivations(&self, layer: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_layer_input(layer, x)?;
        Ok(self.preactivations_unchecked(layer, x))
    }

    pub(crate) fn preactivations_unchecked(&self, layer: usize, x: &Matrix<T>) -> Matrix<T> {
        let enc = &self.encoders[layer];
        let bias = &self.enc_biases[layer];
        let mut u = Matrix::zeros(x.rows(), self.features);
        for t in 0..x.rows() {
            let row = u.row_mut(t);
            row.copy_from_slice(bias);
            for (d, &xv) in x.row(t).iter().enumerate() {
                if xv != T::zero() {
                    axpy(xv, enc.row(d), row);
                }
            }
        }
        u
    }

    /// Sparse codes for one layer.
    pub fn encode_layer(&self, layer: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_layer_input(layer, x)?;
        let u = self.preactivations_unchecked(layer, x);
        if !u.is_finite() {
            return Err(Error::NonFinite {
                what: format!("in encoder pre-activations at layer {layer}"),
            });
        }
        Ok(self.sparsify_unchecked(layer, &u))
    }

    pub(crate) fn sparsify_unchecked(&self, layer: usize, u: &Matrix<T>) -> Matrix<T> {
        let tau = self.thresholds[layer].as_slice();
        let mut z = Matrix::zeros(u.rows(), self.features);
        let mut scratch = Vec::new();
        for t in 0..u.rows() {
            sparsify::apply_into(
                &self.sparsifier,
                u.row(t),
                Some(tau),
                z.row_mut(t),
                &mut scratch,
            );
        }
        z
    }

    /// Encodes every layer of a `[L]` stack of `T × D` inputs.
    pub fn encode(&self, x: &[Matrix<T>]) -> Result<SparseCodes<T>> {
        if x.len() != self.layers {
            return Err(Error::shape("CLT encode layers", self.layers, x.len()));
        }
        let layers = x
            .iter()
            .enumerate()
            .map(|(i, xi)| self.encode_layer(i, xi))
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseCodes { layers })
    }

    /// Decoded contribution `z_source W[source→target]`. Inactive pairs
    /// yield zeros.
    pub fn contribution(&self, codes: &Matrix<T>, source: usize, target: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(codes.rows(), self.hidden);
        if self.is_active(source, target) {
            decode_into(codes, self.decoder(source, target), &mut out);
        }
        out
    }

    fn check_codes(&self, codes: &SparseCodes<T>, target: usize) -> Result<()> {
        if target >= self.layers {
            return Err(Error::InvalidArgument(format!(
                "target layer {target} out of range for {} layers",
                self.layers
            )));
        }
        if codes.layers.len() <= target {
            return Err(Error::shape(
                "sparse codes layers",
                target + 1,
                codes.layers.len(),
            ));
        }
        let rows = codes.layers[0].rows();
        for z in &codes.layers[..=target] {
            if z.cols() != self.features || z.rows() != rows {
                return Err(Error::shape(
                    "sparse codes",
                    format!("[{rows}x{}]", self.features),
                    format!("[{}x{}]", z.rows(), z.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Per-source contributions to `target`, in ascending source order.
    pub fn contributions(&self, codes: &SparseCodes<T>, target: usize) -> Result<Vec<Matrix<T>>> {
        self.check_codes(codes, target)?;
        Ok((0..=target)
            .map(|i| self.contribution(&codes.layers[i], i, target))
            .collect())
    }

    /// `ŷ_target`, summed over sources in ascending order. Equal bit-for-bit
    /// to summing [`Self::contributions`] in the same order.
    pub fn reconstruct(&self, codes: &SparseCodes<T>, target: usize) -> Result<Matrix<T>> {
        let terms = self.contributions(codes, target)?;
        Ok(sum_terms(&terms))
    }

    /// Reconstructs every target layer.
    pub fn reconstruct_all(&self, codes: &SparseCodes<T>) -> Result<Vec<Matrix<T>>> {
        (0..self.layers)
            .map(|j| self.reconstruct(codes, j))
            .collect()
    }

    /// Per-feature norm of the concatenation of all active decoder rows that
    /// read from `(layer, feature)`. Shape `[L][m]`.
    pub fn decoder_norms(&self) -> Vec<Vec<T>> {
        (0..self.layers)
            .map(|i| {
                let mut sq = vec![T::zero(); self.features];
                for j in i..self.layers {
                    if !self.is_active(i, j) {
                        continue;
                    }
                    let w = self.decoder(i, j);
                    for (f, s) in sq.iter_mut().enumerate() {
                        *s = *s + w.row(f).iter().map(|&v| v * v).sum::<T>();
                    }
                }
                sq.into_iter().map(|s| s.sqrt()).collect()
            })
            .collect()
    }
}

/// Sums equally-shaped terms left to right.
pub(crate) fn sum_terms<T: Real>(terms: &[Matrix<T>]) -> Matrix<T> {
    let mut acc = terms[0].clone();
    for term in &terms[1..] {
        for (a, &b) in acc.as_mut_slice().iter_mut().zip(term.as_slice()) {
            *a = *a + b;
        }
    }
    acc
}

/// `out += codes · decoder`, skipping zero codes.
pub(crate) fn decode_into<T: Real>(codes: &Matrix<T>, decoder: &Matrix<T>, out: &mut Matrix<T>) {
    decode_transposed_into(&codes.transpose(), decoder, out);
}

/// `out += codes_tᵀ · decoder` for codes stored `[m][T]`. Each output element
/// accumulates features in ascending order.
pub(crate) fn decode_transposed_into<T: Real>(
    codes_t: &Matrix<T>,
    decoder: &Matrix<T>,
    out: &mut Matrix<T>,
) {
    for f in 0..codes_t.rows() {
        let w = decoder.row(f);
        for (t, &zv) in codes_t.row(f).iter().enumerate() {
            if zv != T::zero() {
                axpy(zv, w, out.row_mut(t));
            }
        }
    }
}
