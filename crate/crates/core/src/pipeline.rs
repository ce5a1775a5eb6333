//! End-to-end stages driven by a [`RunConfig`]: extract, train, and the
//! evaluations. Each stage is a pure function of the config and its input
//! files.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::ablation::{ablation_report, AblationMode, AblationRow};
use crate::attribution::{attribution_heatmap, AttributionMatrix, TokenClass};
use crate::checkpoint::read_checkpoint;
use crate::clt::{init_clt, CltParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::replacement::{sweep, FaithfulnessReport, ReplacementPlan};
use crate::retrieval::{build_index, Aggregation, Hit};
use crate::store::{
    split, write_sidecar, write_trace_file, ActivationTrace, TraceHeader, TraceReader,
};
use crate::trainer::{train, TrainOutputs, TrainResult};
use crate::vit::{init_teacher, LabeledInput, SyntheticImages, VitParams};

/// Teacher and input generator reconstructed from a config.
pub struct Experiment {
    pub config: RunConfig,
    pub teacher: VitParams,
    pub images: SyntheticImages,
}

impl Experiment {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let vit = config.vit_config();
        Ok(Self {
            config: config.clone(),
            teacher: init_teacher(&vit)?,
            images: SyntheticImages::new(&vit),
        })
    }

    pub fn input(&self, index: usize) -> LabeledInput {
        self.images.indexed(self.config.data_seed(), index)
    }

    pub fn inputs(&self, indices: &[usize]) -> Vec<LabeledInput> {
        indices.iter().map(|&i| self.input(i)).collect()
    }

    /// Training and held-out sample indices.
    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        split(
            self.config.data.samples,
            1.0 - self.config.data.val_fraction,
            self.config.split_seed(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractSummary {
    pub samples: usize,
    /// Teacher top-1 accuracy in percent.
    pub baseline_accuracy: f64,
}

/// Runs the toy teacher on every generated input and writes a labeled trace
/// file plus a JSON sidecar.
pub fn extract_toy(config: &RunConfig, out: &Path) -> Result<ExtractSummary> {
    let exp = Experiment::new(config)?;
    let n = config.data.samples;
    let results: Vec<(ActivationTrace, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = exp.input(i);
            let capture = exp.teacher.forward_capture(&s.tokens)?;
            let hit = capture.prediction() == s.label as usize;
            Ok((capture.into_trace(Some(s.label)), hit))
        })
        .collect::<Result<_>>()?;
    let hits = results.iter().filter(|(_, h)| *h).count();
    let traces: Vec<ActivationTrace> = results.into_iter().map(|(t, _)| t).collect();
    let t = &config.teacher;
    let header = TraceHeader::new(n, t.layers, t.tokens, t.hidden, true)?;
    write_trace_file(out, &header, &traces)?;
    let summary = ExtractSummary {
        samples: n,
        baseline_accuracy: 100.0 * hits as f64 / n as f64,
    };
    write_sidecar(
        out,
        &json!({
            "source": "toy_vit",
            "seed": config.seed,
            "teacher": exp.teacher.config,
            "samples": n,
            "baseline_accuracy": summary.baseline_accuracy,
        }),
    )?;
    log::info!(
        "extracted {n} samples, teacher accuracy {:.2}%",
        summary.baseline_accuracy
    );
    Ok(summary)
}

/// Opens an activation file and checks it against the config's teacher dims.
pub fn open_acts(config: &RunConfig, acts: &Path) -> Result<TraceReader> {
    let reader = TraceReader::open(acts)?;
    let h = reader.header();
    let t = &config.teacher;
    if (h.layers(), h.tokens(), h.hidden()) != (t.layers, t.tokens, t.hidden) {
        return Err(Error::shape(
            "activation file (L, T, D) vs config",
            format!("({}, {}, {})", t.layers, t.tokens, t.hidden),
            format!("({}, {}, {})", h.layers(), h.tokens(), h.hidden()),
        ));
    }
    if reader.len() != config.data.samples {
        return Err(Error::shape(
            "activation file samples vs config",
            config.data.samples,
            reader.len(),
        ));
    }
    Ok(reader)
}

/// Trains a CLT on the training split of `acts`. Validation metrics use the
/// held-out split.
pub fn train_from_acts(
    config: &RunConfig,
    acts: &Path,
    outputs: &TrainOutputs,
) -> Result<TrainResult> {
    config.validate()?;
    let reader = open_acts(config, acts)?;
    let (train_idx, val_idx) = split(
        reader.len(),
        1.0 - config.data.val_fraction,
        config.split_seed(),
    )?;
    let train_set = reader.read_many(&train_idx)?;
    let val_set = reader.read_many(&val_idx)?;
    let mut init = init_clt(
        config.teacher.layers,
        config.teacher.hidden,
        config.clt.expansion,
        config.sparsifier(),
        config.clt_seed(),
    )?;
    if config.clt.diagonal_only {
        init = init.into_diagonal_only();
    }
    train(init, &train_set, &val_set, &config.train_config(), outputs)
}

/// Everything the evaluation stages need: teacher, model, and the held-out
/// samples as both regenerated inputs and stored traces.
pub struct EvalContext {
    pub experiment: Experiment,
    pub clt: CltParams,
    pub ids: Vec<usize>,
    pub inputs: Vec<LabeledInput>,
    pub traces: Vec<ActivationTrace>,
}

pub fn eval_context(config: &RunConfig, acts: &Path, ckpt: &Path) -> Result<EvalContext> {
    let experiment = Experiment::new(config)?;
    let reader = open_acts(config, acts)?;
    if reader.labels().is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} has no labels; evaluation needs a labeled activation file",
            acts.display()
        )));
    }
    let clt = read_checkpoint(ckpt)?;
    if (clt.layers(), clt.hidden()) != (config.teacher.layers, config.teacher.hidden) {
        return Err(Error::shape(
            "checkpoint (L, D) vs config",
            format!("({}, {})", config.teacher.layers, config.teacher.hidden),
            format!("({}, {})", clt.layers(), clt.hidden()),
        ));
    }
    let (_, ids) = experiment.split()?;
    let traces = reader.read_many(&ids)?;
    let inputs = experiment.inputs(&ids);
    // The stored traces must come from this config's teacher and inputs.
    let probe = experiment.teacher.forward_capture(&inputs[0].tokens)?;
    if probe.x != traces[0].x || traces[0].label != Some(inputs[0].label) {
        return Err(Error::InvalidArgument(format!(
            "{} was not extracted with this config (seed or teacher differs)",
            acts.display()
        )));
    }
    Ok(EvalContext {
        experiment,
        clt,
        ids,
        inputs,
        traces,
    })
}

pub fn eval_replace(
    config: &RunConfig,
    acts: &Path,
    ckpt: &Path,
    plans: &[ReplacementPlan],
) -> Result<Vec<(ReplacementPlan, FaithfulnessReport)>> {
    let ctx = eval_context(config, acts, ckpt)?;
    sweep(
        &ctx.experiment.teacher,
        &ctx.clt,
        plans,
        &ctx.inputs,
        &config.eval.logits,
    )
}

pub fn attribute(
    config: &RunConfig,
    acts: &Path,
    ckpt: &Path,
    class: TokenClass,
) -> Result<AttributionMatrix> {
    let reader = open_acts(config, acts)?;
    let clt = read_checkpoint(ckpt)?;
    let (_, ids) = split(
        reader.len(),
        1.0 - config.data.val_fraction,
        config.split_seed(),
    )?;
    attribution_heatmap(&clt, &reader.read_many(&ids)?, class)
}

pub fn ablate(
    config: &RunConfig,
    acts: &Path,
    ckpt: &Path,
    modes: &[AblationMode],
    class: TokenClass,
) -> Result<Vec<AblationRow>> {
    let ctx = eval_context(config, acts, ckpt)?;
    ablation_report(
        &ctx.experiment.teacher,
        &ctx.clt,
        &ctx.inputs,
        modes,
        class,
        &config.eval.logits,
    )
}

/// Ranks every sample of `acts` against sample `query` at `layer`.
pub fn retrieve(
    acts: &Path,
    ckpt: &Path,
    layer: usize,
    k: usize,
    aggregation: Aggregation,
    query: usize,
) -> Result<Vec<Hit>> {
    let reader = TraceReader::open(acts)?;
    let clt = read_checkpoint(ckpt)?;
    if query >= reader.len() {
        return Err(Error::InvalidArgument(format!(
            "query id {query} out of range for {} samples",
            reader.len()
        )));
    }
    let traces = reader.read_all()?;
    let ids: Vec<usize> = (0..traces.len()).collect();
    let index = build_index(&clt, &traces, &ids, layer, aggregation)?;
    let q = clt.encode_layer(layer, &traces[query].x[layer])?;
    index.query_codes(&q, k)
}
