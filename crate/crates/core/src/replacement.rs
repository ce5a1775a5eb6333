//! Cascaded MLP replacement and faithfulness metrics.
//!
//! Inside a replacement range the teacher's MLP outputs are swapped for CLT
//! reconstructions computed from codes re-encoded on the modified residual
//! stream, so reconstruction errors compound with depth. Routing limits the
//! swap to CLS rows, patch rows or all rows.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::TokenClass;
use crate::clt::{CltParams, SparseCodes};
use crate::error::{Error, Result};
use crate::numerics::{cosine, kl_divergence, linear_cka, softmax, spearman, Matrix};
use crate::vit::{argmax, ForwardCapture, LabeledInput, VitParams};

fn default_logit_scale() -> f64 {
    100.0
}

fn default_temperature() -> f64 {
    1.0
}

/// How cosine logits become distributions for KL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitScaling {
    #[serde(default = "default_logit_scale")]
    pub scale: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for LogitScaling {
    fn default() -> Self {
        Self {
            scale: default_logit_scale(),
            temperature: default_temperature(),
        }
    }
}

impl LogitScaling {
    pub fn probabilities(&self, logits: &[f32]) -> Result<Vec<f64>> {
        let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 * self.scale).collect();
        softmax(&scaled, self.temperature)
    }

    /// `KL(softmax(baseline) ‖ softmax(other))`.
    pub fn kl(&self, baseline: &[f32], other: &[f32]) -> Result<f64> {
        kl_divergence(&self.probabilities(baseline)?, &self.probabilities(other)?)
    }
}

/// Contiguous inclusive layer range plus token routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplacementPlan {
    pub range: Option<(usize, usize)>,
    pub routing: TokenClass,
}

impl ReplacementPlan {
    pub fn empty() -> Self {
        Self {
            range: None,
            routing: TokenClass::All,
        }
    }

    pub fn new(first: usize, last: usize, routing: TokenClass) -> Result<Self> {
        if first > last {
            return Err(Error::InvalidArgument(format!(
                "replacement range {first}-{last} is reversed"
            )));
        }
        Ok(Self {
            range: Some((first, last)),
            routing,
        })
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.range {
            Some((a, b)) if a > b || b >= layers => Err(Error::InvalidArgument(format!(
                "replacement range {a}-{b} invalid for {layers} layers"
            ))),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        matches!(self.range, Some((a, b)) if (a..=b).contains(&layer))
    }

    pub fn last(&self) -> Option<usize> {
        self.range.map(|(_, b)| b)
    }

    /// `"a-b"` or `"none"`.
    pub fn range_label(&self) -> String {
        match self.range {
            Some((a, b)) => format!("{a}-{b}"),
            None => "none".into(),
        }
    }
}

/// Parses `"a-b"`, a single layer `"a"`, or `"none"`/empty.
pub fn parse_range(s: &str) -> Result<Option<(usize, usize)>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(None);
    }
    let bad = || Error::InvalidArgument(format!("bad layer range {s:?} (expected a-b or none)"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim(), b.trim()),
        None => (s, s),
    };
    let a: usize = a.parse().map_err(|_| bad())?;
    let b: usize = b.parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(Some((a, b)))
}

impl fmt::Display for ReplacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.range_label(), self.routing)
    }
}

impl FromStr for ReplacementPlan {
    type Err = Error;

    /// `"a-b:routing"`, routing defaulting to `all`.
    fn from_str(s: &str) -> Result<Self> {
        let (range, routing) = match s.split_once(':') {
            Some((r, t)) => (r, t.parse()?),
            None => (s, TokenClass::All),
        };
        Ok(Self {
            range: parse_range(range)?,
            routing,
        })
    }
}

/// Source of replacement MLP outputs. `observe` sees the MLP input of every
/// layer up to the end of the range, in order; `output` is then asked for
/// the layers inside the range.
pub trait Surrogate {
    fn reset(&mut self);
    fn observe(&mut self, layer: usize, x: &Matrix) -> Result<()>;
    fn output(&mut self, layer: usize, x: &Matrix) -> Result<Matrix>;
}

/// CLT reconstruction from cascaded codes.
pub struct CltSurrogate<'a> {
    clt: &'a CltParams,
    codes: SparseCodes,
}

impl<'a> CltSurrogate<'a> {
    pub fn new(clt: &'a CltParams) -> Self {
        Self {
            clt,
            codes: SparseCodes { layers: Vec::new() },
        }
    }
}

impl Surrogate for CltSurrogate<'_> {
    fn reset(&mut self) {
        self.codes.layers.clear();
    }

    fn observe(&mut self, layer: usize, x: &Matrix) -> Result<()> {
        if layer != self.codes.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} observed out of order"
            )));
        }
        self.codes.layers.push(self.clt.encode_layer(layer, x)?);
        Ok(())
    }

    fn output(&mut self, layer: usize, _x: &Matrix) -> Result<Matrix> {
        self.clt.reconstruct(&self.codes, layer)
    }
}

/// The teacher's own MLP: a perfect surrogate.
pub struct MlpOracle<'a>(pub &'a VitParams);

impl Surrogate for MlpOracle<'_> {
    fn reset(&mut self) {}

    fn observe(&mut self, _layer: usize, _x: &Matrix) -> Result<()> {
        Ok(())
    }

    fn output(&mut self, layer: usize, x: &Matrix) -> Result<Matrix> {
        self.0.mlp(layer, x)
    }
}

/// Forward pass with `plan` applied using `surrogate`.
pub fn run_with_surrogate(
    vit: &VitParams,
    plan: &ReplacementPlan,
    surrogate: &mut dyn Surrogate,
    input: &Matrix,
) -> Result<ForwardCapture> {
    plan.validate(vit.layers())?;
    surrogate.reset();
    let last = plan.last();
    vit.forward_with_hooks(input, &mut |layer, x| {
        if last.is_none_or(|b| layer > b) {
            return Ok(None);
        }
        surrogate.observe(layer, x)?;
        if !plan.contains(layer) {
            return Ok(None);
        }
        let replaced = surrogate.output(layer, x)?;
        if plan.routing == TokenClass::All {
            return Ok(Some(replaced));
        }
        let mut y = vit.mlp(layer, x)?;
        for t in plan.routing.rows(x.rows()) {
            y.row_mut(t).copy_from_slice(replaced.row(t));
        }
        Ok(Some(y))
    })
}

/// Cascaded CLT replacement of one input.
pub fn run_cascaded(
    vit: &VitParams,
    clt: &CltParams,
    plan: &ReplacementPlan,
    input: &Matrix,
) -> Result<ForwardCapture> {
    check_dims(vit, clt)?;
    run_with_surrogate(vit, plan, &mut CltSurrogate::new(clt), input)
}

pub(crate) fn check_dims(vit: &VitParams, clt: &CltParams) -> Result<()> {
    if vit.layers() != clt.layers() || vit.hidden() != clt.hidden() {
        return Err(Error::shape(
            "CLT vs teacher (layers, hidden)",
            format!("({}, {})", vit.layers(), vit.hidden()),
            format!("({}, {})", clt.layers(), clt.hidden()),
        ));
    }
    Ok(())
}

/// Logits and final CLS embedding of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Vec<f32>,
    pub embedding: Vec<f32>,
}

impl From<ForwardCapture> for ModelOutput {
    fn from(c: ForwardCapture) -> Self {
        Self {
            logits: c.logits,
            embedding: c.cls_embedding,
        }
    }
}

/// Surrogate-vs-baseline comparison. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessReport {
    pub samples: usize,
    pub acc_base: f64,
    pub acc_surrogate: f64,
    /// `acc_surrogate − acc_base`.
    pub delta_acc: f64,
    pub flip_rate: f64,
    /// Mean over samples of `KL(baseline ‖ surrogate)`.
    pub kl_mean: f64,
    pub top1_agreement: f64,
    /// Mean overlap of the two top-5 class sets.
    pub top5_agreement: f64,
    pub cosine_mean: f64,
    pub cka: f64,
    pub spearman: f64,
}

fn top_n(logits: &[f32], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// Builds a report from paired outputs.
pub fn compare_outputs(
    baseline: &[ModelOutput],
    surrogate: &[ModelOutput],
    labels: &[u32],
    scaling: &LogitScaling,
) -> Result<FaithfulnessReport> {
    let n = baseline.len();
    if n == 0 || surrogate.len() != n || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need equal, nonzero sample counts (baseline {n}, surrogate {}, labels {})",
            surrogate.len(),
            labels.len()
        )));
    }
    let classes = baseline[0].logits.len();
    let top = 5.min(classes);
    let (mut hit_b, mut hit_s, mut flips) = (0, 0, 0);
    let (mut kl, mut cos, mut overlap) = (0.0, 0.0, 0.0);
    for ((b, s), &label) in baseline.iter().zip(surrogate).zip(labels) {
        let (pb, ps) = (argmax(&b.logits), argmax(&s.logits));
        hit_b += (pb == label as usize) as usize;
        hit_s += (ps == label as usize) as usize;
        flips += (pb != ps) as usize;
        kl += scaling.kl(&b.logits, &s.logits)?;
        cos += cosine(&b.embedding, &s.embedding).ok_or(Error::Undefined {
            metric: "embedding cosine",
            reason: "zero-norm embedding",
        })?;
        let tb = top_n(&b.logits, top);
        let ts = top_n(&s.logits, top);
        overlap += tb.iter().filter(|c| ts.contains(c)).count() as f64 / top as f64;
    }
    let emb = |outs: &[ModelOutput]| {
        Matrix::from_rows(&outs.iter().map(|o| o.embedding.clone()).collect::<Vec<_>>())
    };
    let cka = linear_cka(&emb(baseline)?, &emb(surrogate)?)?;
    let (mean_b, mean_s) = (
        class_mean_logits(baseline, labels, classes),
        class_mean_logits(surrogate, labels, classes),
    );
    let spearman = spearman(&mean_b, &mean_s)?;
    let acc_base = percent(hit_b, n);
    let acc_surrogate = percent(hit_s, n);
    let flip_rate = percent(flips, n);
    Ok(FaithfulnessReport {
        samples: n,
        acc_base,
        acc_surrogate,
        delta_acc: acc_surrogate - acc_base,
        flip_rate,
        kl_mean: kl / n as f64,
        top1_agreement: 100.0 - flip_rate,
        top5_agreement: 100.0 * overlap / n as f64,
        cosine_mean: cos / n as f64,
        cka,
        spearman,
    })
}

/// Flattened per-class mean logit vectors, classes without samples omitted.
fn class_mean_logits(outs: &[ModelOutput], labels: &[u32], classes: usize) -> Vec<f64> {
    let mut sums = vec![vec![0.0f64; classes]; classes];
    let mut counts = vec![0usize; classes];
    for (o, &l) in outs.iter().zip(labels) {
        counts[l as usize] += 1;
        for (s, &v) in sums[l as usize].iter_mut().zip(&o.logits) {
            *s += v as f64;
        }
    }
    sums.into_iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .flat_map(|(row, &c)| row.into_iter().map(move |v| v / c as f64))
        .collect()
}

pub fn baseline_outputs(vit: &VitParams, inputs: &[LabeledInput]) -> Result<Vec<ModelOutput>> {
    inputs
        .par_iter()
        .map(|s| vit.forward_capture(&s.tokens).map(ModelOutput::from))
        .collect()
}

fn labels_of(inputs: &[LabeledInput]) -> Vec<u32> {
    inputs.iter().map(|s| s.label).collect()
}

/// Faithfulness of one plan over labeled inputs.
pub fn evaluate_plan(
    vit: &VitParams,
    clt: &CltParams,
    plan: &ReplacementPlan,
    inputs: &[LabeledInput],
    scaling: &LogitScaling,
) -> Result<FaithfulnessReport> {
    let baseline = baseline_outputs(vit, inputs)?;
    evaluate_against(vit, clt, plan, inputs, &baseline, scaling)
}

fn evaluate_against(
    vit: &VitParams,
    clt: &CltParams,
    plan: &ReplacementPlan,
    inputs: &[LabeledInput],
    baseline: &[ModelOutput],
    scaling: &LogitScaling,
) -> Result<FaithfulnessReport> {
    check_dims(vit, clt)?;
    plan.validate(vit.layers())?;
    let surrogate: Vec<ModelOutput> = inputs
        .par_iter()
        .map(|s| run_cascaded(vit, clt, plan, &s.tokens).map(ModelOutput::from))
        .collect::<Result<_>>()?;
    compare_outputs(baseline, &surrogate, &labels_of(inputs), scaling)
}

/// One report per plan, sharing a single baseline pass.
pub fn sweep(
    vit: &VitParams,
    clt: &CltParams,
    plans: &[ReplacementPlan],
    inputs: &[LabeledInput],
    scaling: &LogitScaling,
) -> Result<Vec<(ReplacementPlan, FaithfulnessReport)>> {
    let baseline = baseline_outputs(vit, inputs)?;
    plans
        .iter()
        .map(|plan| {
            Ok((
                *plan,
                evaluate_against(vit, clt, plan, inputs, &baseline, scaling)?,
            ))
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "range,routing,samples,acc_base,acc_surrogate,delta_acc,flip_rate,kl_mean,top1_agreement,top5_agreement,cosine_mean,cka,spearman";

pub fn sweep_csv(rows: &[(ReplacementPlan, FaithfulnessReport)]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (plan, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            plan.range_label(),
            plan.routing,
            r.samples,
            r.acc_base,
            r.acc_surrogate,
            r.delta_acc,
            r.flip_rate,
            r.kl_mean,
            r.top1_agreement,
            r.top5_agreement,
            r.cosine_mean,
            r.cka,
            r.spearman
        ));
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[(ReplacementPlan, FaithfulnessReport)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(sweep_csv(rows).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
