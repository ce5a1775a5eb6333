//! Sparsifying nonlinearities applied to encoder pre-activations, with their
//! backward rules.
//!
//! * `JumpRelu`: `z = u · 1[u > τ]`, per-feature learned thresholds. The
//!   threshold gradient uses a rectangular straight-through kernel of width
//!   `bandwidth` centred on τ.
//! * `ReluTopK`: keep the `k` largest strictly positive entries.
//! * `AbsTopK`: keep the `k` entries of largest magnitude, with their sign.
//! * `Identity`: no sparsification. Only meaningful for closed-form tests.
//!
//! Top-k ties are broken towards the lower feature index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const DEFAULT_BANDWIDTH: f64 = 1e-3;
pub const DEFAULT_K: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifierKind {
    JumpRelu,
    ReluTopK,
    AbsTopK,
    Identity,
}

impl SparsifierKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            SparsifierKind::JumpRelu => 0,
            SparsifierKind::ReluTopK => 1,
            SparsifierKind::AbsTopK => 2,
            SparsifierKind::Identity => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SparsifierKind::JumpRelu,
            1 => SparsifierKind::ReluTopK,
            2 => SparsifierKind::AbsTopK,
            3 => SparsifierKind::Identity,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SparsifierKind::JumpRelu => "jump_relu",
            SparsifierKind::ReluTopK => "relu_top_k",
            SparsifierKind::AbsTopK => "abs_top_k",
            SparsifierKind::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsifierSpec {
    pub kind: SparsifierKind,
    /// Retained features per token for the top-k kinds.
    pub k: usize,
    /// Width of the straight-through band for JumpReLU thresholds.
    pub bandwidth: f64,
}

impl SparsifierSpec {
    pub fn jump_relu(bandwidth: f64) -> Self {
        Self {
            kind: SparsifierKind::JumpRelu,
            k: 0,
            bandwidth,
        }
    }

    pub fn relu_top_k(k: usize) -> Self {
        Self {
            kind: SparsifierKind::ReluTopK,
            k,
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }

    pub fn abs_top_k(k: usize) -> Self {
        Self {
            kind: SparsifierKind::AbsTopK,
            k,
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: SparsifierKind::Identity,
            k: 0,
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }

    pub fn is_top_k(&self) -> bool {
        matches!(
            self.kind,
            SparsifierKind::ReluTopK | SparsifierKind::AbsTopK
        )
    }

    pub fn uses_thresholds(&self) -> bool {
        self.kind == SparsifierKind::JumpRelu
    }

    /// Checks the spec against a feature dimension.
    pub fn validate(&self, features: usize) -> Result<()> {
        if self.is_top_k() && (self.k == 0 || self.k > features) {
            return Err(Error::InvalidArgument(format!(
                "top-k sparsifier needs 1 <= k <= {features}, got k = {}",
                self.k
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for SparsifierSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            SparsifierKind::JumpRelu => write!(f, "jump_relu(eps={})", self.bandwidth),
            SparsifierKind::Identity => write!(f, "identity"),
            kind => write!(f, "{}(k={})", kind.name(), self.k),
        }
    }
}

/// Gradients produced by [`backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparsifierGrad<T> {
    pub grad_u: Vec<T>,
    /// Present only for JumpReLU.
    pub grad_tau: Option<Vec<T>>,
}

fn check_inputs<T: Real>(spec: &SparsifierSpec, u: &[T], tau: Option<&[T]>) -> Result<()> {
    spec.validate(u.len())?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "in sparsifier pre-activations".into(),
        });
    }
    if spec.uses_thresholds() {
        let tau = tau
            .ok_or_else(|| Error::InvalidArgument("JumpReLU requires a threshold vector".into()))?;
        if tau.len() != u.len() {
            return Err(Error::shape("sparsifier thresholds", u.len(), tau.len()));
        }
        if tau.iter().any(|t| !(*t >= T::zero())) {
            return Err(Error::InvalidArgument("thresholds must be >= 0".into()));
        }
    }
    Ok(())
}

/// Applies the sparsifier to one token's pre-activations.
pub fn apply<T: Real>(spec: &SparsifierSpec, u: &[T], tau: Option<&[T]>) -> Result<Vec<T>> {
    check_inputs(spec, u, tau)?;
    let mut z = vec![T::zero(); u.len()];
    apply_into(spec, u, tau, &mut z, &mut Vec::new());
    Ok(z)
}

/// Backward pass for one token: maps the upstream gradient wrt `z` to
/// gradients wrt `u` and (JumpReLU only) `τ`.
pub fn backward<T: Real>(
    spec: &SparsifierSpec,
    u: &[T],
    tau: Option<&[T]>,
    upstream: &[T],
) -> Result<SparsifierGrad<T>> {
    check_inputs(spec, u, tau)?;
    if upstream.len() != u.len() {
        return Err(Error::shape("sparsifier upstream", u.len(), upstream.len()));
    }
    let mut grad_u = vec![T::zero(); u.len()];
    let mut grad_tau = spec.uses_thresholds().then(|| vec![T::zero(); u.len()]);
    backward_into(
        spec,
        u,
        tau,
        upstream,
        &mut grad_u,
        grad_tau.as_deref_mut(),
        &mut Vec::new(),
    );
    Ok(SparsifierGrad { grad_u, grad_tau })
}

/// Orders candidates by descending key, then ascending index.
fn rank_desc<T: Real>(keys: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Fills `kept` with the selected indices (unordered).
fn select_top_k<T: Real>(spec: &SparsifierSpec, u: &[T], kept: &mut Vec<usize>) {
    kept.clear();
    match spec.kind {
        SparsifierKind::ReluTopK => {
            kept.extend((0..u.len()).filter(|&i| u[i] > T::zero()));
            if kept.len() > spec.k {
                kept.select_nth_unstable_by(spec.k - 1, rank_desc(u));
                kept.truncate(spec.k);
            }
        }
        SparsifierKind::AbsTopK => {
            kept.extend(0..u.len());
            if kept.len() > spec.k {
                let cmp = |&a: &usize, &b: &usize| {
                    u[b].abs()
                        .partial_cmp(&u[a].abs())
                        .unwrap_or(Ordering::Equal)
                        .then(a.cmp(&b))
                };
                kept.select_nth_unstable_by(spec.k - 1, cmp);
                kept.truncate(spec.k);
            }
        }
        _ => unreachable!("select_top_k on a non-top-k sparsifier"),
    }
}

/// Unchecked forward used on hot paths. `scratch` is reused across calls.
pub(crate) fn apply_into<T: Real>(
    spec: &SparsifierSpec,
    u: &[T],
    tau: Option<&[T]>,
    z: &mut [T],
    scratch: &mut Vec<usize>,
) {
    match spec.kind {
        SparsifierKind::Identity => z.copy_from_slice(u),
        SparsifierKind::JumpRelu => {
            let tau = tau.expect("JumpReLU thresholds");
            for ((zi, &ui), &ti) in z.iter_mut().zip(u).zip(tau) {
                *zi = if ui > ti { ui } else { T::zero() };
            }
        }
        SparsifierKind::ReluTopK | SparsifierKind::AbsTopK => {
            z.fill(T::zero());
            select_top_k(spec, u, scratch);
            for &i in scratch.iter() {
                z[i] = u[i];
            }
        }
    }
}

/// Indices at which the backward pass can produce a nonzero gradient. The
/// trainer only materialises upstream gradients on this set.
pub(crate) fn gradient_support<T: Real>(
    spec: &SparsifierSpec,
    u: &[T],
    tau: Option<&[T]>,
    out: &mut Vec<usize>,
) {
    out.clear();
    match spec.kind {
        SparsifierKind::Identity => out.extend(0..u.len()),
        SparsifierKind::JumpRelu => {
            let tau = tau.expect("JumpReLU thresholds");
            let half = T::of_f64(spec.bandwidth / 2.0);
            out.extend((0..u.len()).filter(|&i| u[i] > tau[i] || (u[i] - tau[i]).abs() < half));
        }
        SparsifierKind::ReluTopK | SparsifierKind::AbsTopK => {
            select_top_k(spec, u, out);
            out.sort_unstable();
        }
    }
}

/// Unchecked backward. `grad_u` is overwritten; `grad_tau` is accumulated.
pub(crate) fn backward_into<T: Real>(
    spec: &SparsifierSpec,
    u: &[T],
    tau: Option<&[T]>,
    upstream: &[T],
    grad_u: &mut [T],
    grad_tau: Option<&mut [T]>,
    scratch: &mut Vec<usize>,
) {
    match spec.kind {
        SparsifierKind::Identity => grad_u.copy_from_slice(upstream),
        SparsifierKind::JumpRelu => {
            let tau = tau.expect("JumpReLU thresholds");
            for i in 0..u.len() {
                grad_u[i] = if u[i] > tau[i] {
                    upstream[i]
                } else {
                    T::zero()
                };
            }
            if let Some(gt) = grad_tau {
                let eps = T::of_f64(spec.bandwidth);
                let half = T::of_f64(spec.bandwidth / 2.0);
                for i in 0..u.len() {
                    if (u[i] - tau[i]).abs() < half {
                        gt[i] = gt[i] - u[i] / eps * upstream[i];
                    }
                }
            }
        }
        SparsifierKind::ReluTopK | SparsifierKind::AbsTopK => {
            grad_u.fill(T::zero());
            select_top_k(spec, u, scratch);
            for &i in scratch.iter() {
                grad_u[i] = upstream[i];
            }
        }
    }
}
