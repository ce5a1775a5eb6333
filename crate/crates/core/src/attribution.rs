//! Projection attribution of reconstructions onto source layers.
//!
//! For target `j` and token `t`, source `i` scores
//! `⟨c_{i→j}, ŷ_j⟩ / ‖ŷ_j‖²`, the signed fraction of the reconstruction
//! explained by that source. Scores over `i ≤ j` sum to one per token.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clt::{sum_terms, CltParams, SparseCodes};
use crate::error::{Error, Result};
use crate::numerics::{dot_f64, Matrix};
use crate::store::ActivationTrace;

/// Tokens whose reconstruction norm falls below this are skipped.
pub const NORM_FLOOR: f64 = 1e-8;

/// Which token rows an average runs over. `All` includes CLS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Cls,
    Patches,
    All,
}

impl TokenClass {
    pub fn rows(self, tokens: usize) -> Range<usize> {
        match self {
            TokenClass::Cls => 0..1,
            TokenClass::Patches => 1..tokens,
            TokenClass::All => 0..tokens,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Cls => "cls",
            TokenClass::Patches => "patches",
            TokenClass::All => "all",
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(TokenClass::Cls),
            "patches" | "patch" => Ok(TokenClass::Patches),
            "all" => Ok(TokenClass::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown token class {s:?} (expected cls, patches or all)"
            ))),
        }
    }
}

/// Per-token projection ratios of each contribution onto their sum, or
/// `None` when the sum is below [`NORM_FLOOR`].
pub fn token_scores(
    contributions: &[Matrix],
    reconstruction: &Matrix,
    token: usize,
) -> Option<Vec<f64>> {
    let yh = reconstruction.row(token);
    let norm2 = dot_f64(yh, yh);
    if norm2.sqrt() < NORM_FLOOR {
        return None;
    }
    Some(
        contributions
            .iter()
            .map(|c| dot_f64(c.row(token), yh) / norm2)
            .collect(),
    )
}

/// Scores of one sample for one target.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    /// Indexed by source layer `0..=target`.
    pub scores: Vec<f64>,
    pub used_tokens: usize,
    pub skipped_tokens: usize,
}

/// Token-averaged scores of every source for `target` on one sample.
pub fn sample_scores(
    params: &CltParams,
    codes: &SparseCodes,
    target: usize,
    class: TokenClass,
) -> Result<SampleScores> {
    let contributions = params.contributions(codes, target)?;
    let reconstruction = sum_terms(&contributions);
    let mut scores = vec![0.0; target + 1];
    let (mut used, mut skipped) = (0, 0);
    for t in class.rows(reconstruction.rows()) {
        match token_scores(&contributions, &reconstruction, t) {
            Some(s) => {
                for (acc, v) in scores.iter_mut().zip(s) {
                    *acc += v;
                }
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::Undefined {
            metric: "projection score",
            reason: "every selected token has a near-zero reconstruction",
        });
    }
    scores.iter_mut().for_each(|s| *s /= used as f64);
    Ok(SampleScores {
        scores,
        used_tokens: used,
        skipped_tokens: skipped,
    })
}

/// Lower-triangular matrix of averaged projection scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    pub token_class: TokenClass,
    /// `scores[target][source]`; entries with `source > target` are zero.
    pub scores: Vec<Vec<f64>>,
    /// Samples contributing to each target row.
    pub samples: Vec<usize>,
    pub skipped_tokens: usize,
}

impl AttributionMatrix {
    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.scores[target][source]
    }

    pub fn diagonal_mean(&self) -> f64 {
        let l = self.layers();
        (0..l).map(|j| self.scores[j][j]).sum::<f64>() / l as f64
    }

    /// Mean over the strict lower triangle; `None` for a single layer.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let l = self.layers();
        let cells: Vec<f64> = (0..l)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .map(|(i, j)| self.scores[j][i])
            .collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }

    /// Header `target,0,1,…`; one row per target, blank cells above the
    /// diagonal.
    pub fn to_csv(&self) -> String {
        let l = self.layers();
        let mut out = String::from("target");
        for i in 0..l {
            out.push_str(&format!(",{i}"));
        }
        out.push('\n');
        for j in 0..l {
            out.push_str(&j.to_string());
            for i in 0..l {
                out.push(',');
                if i <= j {
                    out.push_str(&self.scores[j][i].to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_csv().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Averages `sample_scores` over samples for every target. Samples whose
/// selected tokens are all degenerate are skipped for that target.
pub fn attribution_heatmap(
    params: &CltParams,
    traces: &[ActivationTrace],
    class: TokenClass,
) -> Result<AttributionMatrix> {
    let l = params.layers();
    let per_sample: Vec<Vec<Option<SampleScores>>> = traces
        .par_iter()
        .map(|trace| {
            let codes = params.encode(&trace.x)?;
            (0..l)
                .map(|j| match sample_scores(params, &codes, j, class) {
                    Ok(s) => Ok(Some(s)),
                    Err(Error::Undefined { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = vec![vec![0.0; l]; l];
    let mut samples = vec![0usize; l];
    let mut skipped_tokens = 0;
    for sample in &per_sample {
        for (j, s) in sample.iter().enumerate() {
            match s {
                Some(s) => {
                    for (i, v) in s.scores.iter().enumerate() {
                        scores[j][i] += v;
                    }
                    samples[j] += 1;
                    skipped_tokens += s.skipped_tokens;
                }
                None => skipped_tokens += class.rows(trace_tokens(traces)).len(),
            }
        }
    }
    for j in 0..l {
        if samples[j] == 0 {
            return Err(Error::Undefined {
                metric: "projection score",
                reason: "no sample has a usable token for some target",
            });
        }
        scores[j].iter_mut().for_each(|v| *v /= samples[j] as f64);
    }
    Ok(AttributionMatrix {
        token_class: class,
        scores,
        samples,
        skipped_tokens,
    })
}

fn trace_tokens(traces: &[ActivationTrace]) -> usize {
    traces
        .first()
        .and_then(|t| t.x.first())
        .map_or(0, |x| x.rows())
}
