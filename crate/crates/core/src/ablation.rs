//! Per-instance source-layer ablations at the final target layer.
//!
//! Sources are ranked per sample by their projection score onto the final
//! reconstruction. Drop-top-n removes the n best-ranked sources; keep-top-n
//! retains only them. The ablated reconstruction replaces the last MLP
//! output; every earlier layer runs unmodified.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attribution::{sample_scores, TokenClass};
use crate::clt::{sum_terms, CltParams, SparseCodes};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::replacement::{check_dims, LogitScaling};
use crate::vit::{argmax, LabeledInput, VitParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Full,
    DropTop(usize),
    KeepTop(usize),
}

impl AblationMode {
    pub fn validate(&self, layers: usize) -> Result<()> {
        match *self {
            AblationMode::DropTop(n) | AblationMode::KeepTop(n) if n == 0 || n > layers => Err(
                Error::InvalidArgument(format!("ablation {self} needs 1 <= n <= {layers}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationMode::Full => f.write_str("full"),
            AblationMode::DropTop(n) => write!(f, "drop{n}"),
            AblationMode::KeepTop(n) => write!(f, "keep{n}"),
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    /// `full`, `dropN` or `keepN`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let count = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad ablation mode {s:?}")))
        };
        if s == "full" {
            Ok(AblationMode::Full)
        } else if let Some(rest) = s.strip_prefix("drop") {
            Ok(AblationMode::DropTop(count(rest)?))
        } else if let Some(rest) = s.strip_prefix("keep") {
            Ok(AblationMode::KeepTop(count(rest)?))
        } else {
            Err(Error::InvalidArgument(format!(
                "bad ablation mode {s:?} (expected full, dropN or keepN)"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedSource {
    pub layer: usize,
    pub score: f64,
}

/// Sources of the final layer in descending score order, ties to the lower
/// layer.
pub fn rank_sources(
    params: &CltParams,
    codes: &SparseCodes,
    class: TokenClass,
) -> Result<Vec<RankedSource>> {
    let target = params.layers() - 1;
    let s = sample_scores(params, codes, target, class)?;
    let mut ranked: Vec<RankedSource> = s
        .scores
        .into_iter()
        .enumerate()
        .map(|(layer, score)| RankedSource { layer, score })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    Ok(ranked)
}

/// Source layers retained under `mode`, ascending.
pub fn retained_sources(ranked: &[RankedSource], mode: AblationMode) -> Vec<usize> {
    let mut keep: Vec<usize> = match mode {
        AblationMode::Full => ranked.iter().map(|r| r.layer).collect(),
        AblationMode::DropTop(n) => ranked.iter().skip(n).map(|r| r.layer).collect(),
        AblationMode::KeepTop(n) => ranked.iter().take(n).map(|r| r.layer).collect(),
    };
    keep.sort_unstable();
    keep
}

/// Final-layer reconstruction from the retained sources, summed in
/// ascending source order so that `Full` equals `reconstruct` bit for bit.
pub fn ablated_final_output(
    params: &CltParams,
    codes: &SparseCodes,
    mode: AblationMode,
    class: TokenClass,
) -> Result<Matrix> {
    mode.validate(params.layers())?;
    let target = params.layers() - 1;
    let terms = params.contributions(codes, target)?;
    let ranked = match mode {
        AblationMode::Full => (0..=target)
            .map(|layer| RankedSource { layer, score: 0.0 })
            .collect(),
        _ => rank_sources(params, codes, class)?,
    };
    let kept: Vec<Matrix> = retained_sources(&ranked, mode)
        .into_iter()
        .map(|i| terms[i].clone())
        .collect();
    if kept.is_empty() {
        return Ok(Matrix::zeros(terms[0].rows(), terms[0].cols()));
    }
    Ok(sum_terms(&kept))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub token_class: TokenClass,
    pub samples: usize,
    pub acc_base: f64,
    pub accuracy: f64,
    /// Mean over samples of `KL(baseline ‖ ablated)`.
    pub kl_mean: f64,
}

/// Accuracy and KL for each mode, substituting only the final MLP output.
pub fn ablation_report(
    vit: &VitParams,
    clt: &CltParams,
    inputs: &[LabeledInput],
    modes: &[AblationMode],
    class: TokenClass,
    scaling: &LogitScaling,
) -> Result<Vec<AblationRow>> {
    check_dims(vit, clt)?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no samples to ablate".into()));
    }
    for m in modes {
        m.validate(clt.layers())?;
    }
    let last = vit.layers() - 1;
    // Per sample: baseline hit, then (hit, kl) per mode.
    let per_sample: Vec<(bool, Vec<(bool, f64)>)> = inputs
        .par_iter()
        .map(|s| {
            let base = vit.forward_capture(&s.tokens)?;
            let codes = clt.encode(&base.x)?;
            let rows = modes
                .iter()
                .map(|&mode| {
                    let y = ablated_final_output(clt, &codes, mode, class)?;
                    let mut slot = Some(y);
                    let out = vit.forward_with_hooks(&s.tokens, &mut |layer, _| {
                        Ok(if layer == last { slot.take() } else { None })
                    })?;
                    Ok((
                        argmax(&out.logits) == s.label as usize,
                        scaling.kl(&base.logits, &out.logits)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((base.prediction() == s.label as usize, rows))
        })
        .collect::<Result<_>>()?;

    let n = inputs.len() as f64;
    let acc_base = 100.0 * per_sample.iter().filter(|(hit, _)| *hit).count() as f64 / n;
    Ok(modes
        .iter()
        .enumerate()
        .map(|(k, &mode)| {
            let hits = per_sample.iter().filter(|(_, r)| r[k].0).count();
            let kl: f64 = per_sample.iter().map(|(_, r)| r[k].1).sum();
            AblationRow {
                mode,
                token_class: class,
                samples: inputs.len(),
                acc_base,
                accuracy: 100.0 * hits as f64 / n,
                kl_mean: kl / n,
            }
        })
        .collect())
}

pub const ABLATION_CSV_HEADER: &str = "mode,token_class,samples,acc_base,accuracy,kl_mean";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode, r.token_class, r.samples, r.acc_base, r.accuracy, r.kl_mean
        ));
    }
    out
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(ablation_csv(rows).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clt::init_clt;
    use crate::clt::tests::random_inputs;
    use crate::numerics::dot_f64;
    use crate::sparsify::SparsifierSpec;
    use crate::vit::{init_teacher, SyntheticImages, VitConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CltParams {
        init_clt(4, 6, 3, SparsifierSpec::relu_top_k(6), 8).unwrap()
    }

    fn codes(p: &CltParams, seed: u64) -> SparseCodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.encode(&random_inputs(&mut rng, 4, 5, 6)).unwrap()
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<AblationMode>().unwrap(), AblationMode::Full);
        assert_eq!(
            "drop1".parse::<AblationMode>().unwrap(),
            AblationMode::DropTop(1)
        );
        assert_eq!(
            "keep4".parse::<AblationMode>().unwrap(),
            AblationMode::KeepTop(4)
        );
        assert!("keep".parse::<AblationMode>().is_err());
        assert!(AblationMode::KeepTop(5).validate(4).is_err());
        assert!(AblationMode::DropTop(0).validate(4).is_err());
        assert_eq!(AblationMode::KeepTop(4).to_string(), "keep4");
    }

    #[test]
    fn full_and_keep_all_equal_reconstruct() {
        let p = model();
        let z = codes(&p, 1);
        let full = ablated_final_output(&p, &z, AblationMode::Full, TokenClass::All).unwrap();
        assert_eq!(full, p.reconstruct(&z, 3).unwrap());
        let keep = ablated_final_output(&p, &z, AblationMode::KeepTop(4), TokenClass::All).unwrap();
        assert_eq!(keep, full);
    }

    #[test]
    fn drop_top1_plus_dropped_term_is_full() {
        let p = model();
        let z = codes(&p, 2);
        let ranked = rank_sources(&p, &z, TokenClass::All).unwrap();
        let dropped = p.contribution(&z.layers[ranked[0].layer], ranked[0].layer, 3);
        let mut sum =
            ablated_final_output(&p, &z, AblationMode::DropTop(1), TokenClass::All).unwrap();
        sum.add_assign(&dropped).unwrap();
        let full = p.reconstruct(&z, 3).unwrap();
        for (a, b) in sum.as_slice().iter().zip(full.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn diagonal_only_ranks_last_layer_first() {
        let p = model().into_diagonal_only();
        let z = codes(&p, 3);
        let ranked = rank_sources(&p, &z, TokenClass::Cls).unwrap();
        assert_eq!(
            ranked[0],
            RankedSource {
                layer: 3,
                score: 1.0
            }
        );
        assert!(ranked[1..].iter().all(|r| r.score == 0.0));
        assert_eq!(
            ranked[1..].iter().map(|r| r.layer).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn ranking_matches_brute_force_projection() {
        let p = model();
        let z = codes(&p, 4);
        let ranked = rank_sources(&p, &z, TokenClass::All).unwrap();
        let yh = p.reconstruct(&z, 3).unwrap();
        let mut expected: Vec<(usize, f64)> = (0..4)
            .map(|i| {
                let c = p.contribution(&z.layers[i], i, 3);
                let s: f64 = (0..5)
                    .map(|t| dot_f64(c.row(t), yh.row(t)) / dot_f64(yh.row(t), yh.row(t)))
                    .sum();
                (i, s / 5.0)
            })
            .collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (r, e) in ranked.iter().zip(&expected) {
            assert_eq!(r.layer, e.0);
            assert!((r.score - e.1).abs() < 1e-9);
        }
    }

    #[test]
    fn rankings_are_per_instance() {
        let p = model();
        let first = rank_sources(&p, &codes(&p, 0), TokenClass::All).unwrap()[0].layer;
        let differs = (1..50).any(|seed| {
            rank_sources(&p, &codes(&p, seed), TokenClass::All).unwrap()[0].layer != first
        });
        assert!(differs);
    }

    #[test]
    fn report_is_deterministic_for_repeated_modes() {
        let cfg = VitConfig::new(4, 5, 6, 2, 3, 1);
        let vit = init_teacher(&cfg).unwrap();
        let inputs = SyntheticImages::new(&cfg).dataset(2, 10);
        let p = model();
        let rows = ablation_report(
            &vit,
            &p,
            &inputs,
            &[
                AblationMode::Full,
                AblationMode::DropTop(1),
                AblationMode::Full,
            ],
            TokenClass::All,
            &LogitScaling::default(),
        )
        .unwrap();
        assert_eq!(rows[0], rows[2]);
        assert!(ablation_csv(&rows).starts_with(ABLATION_CSV_HEADER));
    }
}
