//! Layerwise nearest-neighbour retrieval over aggregated sparse codes.
//!
//! Each corpus sample is summarised per layer by the mean of its patch-token
//! codes or by its CLS code. Queries rank the corpus by cosine similarity,
//! computed in f64, with ties going to the lower sample id.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clt::CltParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::store::ActivationTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[serde(rename = "mean", alias = "mean_patches")]
    MeanPatches,
    Cls,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MeanPatches => "mean",
            Aggregation::Cls => "cls",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean_patches" => Ok(Aggregation::MeanPatches),
            "cls" => Ok(Aggregation::Cls),
            _ => Err(Error::InvalidArgument(format!(
                "unknown aggregation {s:?} (expected mean or cls)"
            ))),
        }
    }
}

/// Descriptor of a `T × m` code matrix.
pub fn aggregate(codes: &Matrix, aggregation: Aggregation) -> Vec<f64> {
    match aggregation {
        Aggregation::Cls => codes.row(0).iter().map(|&v| v as f64).collect(),
        Aggregation::MeanPatches => {
            let mut out = vec![0.0; codes.cols()];
            let patches = codes.rows() - 1;
            for t in 1..codes.rows() {
                for (o, &v) in out.iter_mut().zip(codes.row(t)) {
                    *o += v as f64;
                }
            }
            out.iter_mut().for_each(|o| *o /= patches as f64);
            out
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerIndex {
    pub layer: usize,
    pub aggregation: Aggregation,
    pub ids: Vec<usize>,
    pub descriptors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    /// Cosine similarity; `-inf` for zero-norm corpus descriptors.
    pub similarity: f64,
}

impl LayerIndex {
    pub fn from_descriptors(
        layer: usize,
        aggregation: Aggregation,
        ids: Vec<usize>,
        descriptors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if ids.len() != descriptors.len() {
            return Err(Error::shape(
                "index ids vs descriptors",
                descriptors.len(),
                ids.len(),
            ));
        }
        if let Some(first) = descriptors.first() {
            if let Some(bad) = descriptors.iter().find(|d| d.len() != first.len()) {
                return Err(Error::shape("descriptor width", first.len(), bad.len()));
            }
        }
        let norms = descriptors.iter().map(|d| norm(d)).collect();
        Ok(Self {
            layer,
            aggregation,
            ids,
            descriptors,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of corpus descriptors with zero norm.
    pub fn zero_descriptors(&self) -> usize {
        self.norms.iter().filter(|&&n| n == 0.0).count()
    }

    /// Top-`k` corpus entries by cosine similarity to `descriptor`.
    pub fn query(&self, descriptor: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} out of range for a corpus of {}",
                self.len()
            )));
        }
        if descriptor.len() != self.descriptors[0].len() {
            return Err(Error::shape(
                "query descriptor",
                self.descriptors[0].len(),
                descriptor.len(),
            ));
        }
        let qn = norm(descriptor);
        if qn == 0.0 {
            return Err(Error::Undefined {
                metric: "cosine similarity",
                reason: "zero-norm query",
            });
        }
        let mut hits: Vec<Hit> = self
            .descriptors
            .iter()
            .zip(&self.norms)
            .zip(&self.ids)
            .map(|((d, &n), &id)| Hit {
                id,
                similarity: if n == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    d.iter().zip(descriptor).map(|(a, b)| a * b).sum::<f64>() / (n * qn)
                },
            })
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Aggregates `codes` with the index's mode, then queries.
    pub fn query_codes(&self, codes: &Matrix, k: usize) -> Result<Vec<Hit>> {
        self.query(&aggregate(codes, self.aggregation), k)
    }
}

/// Encodes every trace at `layer` and aggregates its codes.
pub fn build_index(
    params: &CltParams,
    traces: &[ActivationTrace],
    ids: &[usize],
    layer: usize,
    aggregation: Aggregation,
) -> Result<LayerIndex> {
    if traces.len() != ids.len() {
        return Err(Error::shape("index traces vs ids", traces.len(), ids.len()));
    }
    if layer >= params.layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range"
        )));
    }
    let descriptors = traces
        .iter()
        .map(|t| {
            Ok(aggregate(
                &params.encode_layer(layer, &t.x[layer])?,
                aggregation,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    LayerIndex::from_descriptors(layer, aggregation, ids.to_vec(), descriptors)
}

pub fn hits_csv(hits: &[Hit]) -> String {
    let mut out = String::from("rank,id,similarity\n");
    for (r, h) in hits.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", r + 1, h.id, h.similarity));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(desc: Vec<Vec<f64>>) -> LayerIndex {
        let ids = (0..desc.len()).collect();
        LayerIndex::from_descriptors(0, Aggregation::Cls, ids, desc).unwrap()
    }

    #[test]
    fn mean_patches_hand_average() {
        let codes = Matrix::from_rows(&[[9.0f32, 9.0], [1.0, 2.0], [3.0, 6.0]]).unwrap();
        assert_eq!(aggregate(&codes, Aggregation::MeanPatches), vec![2.0, 4.0]);
        assert_eq!(aggregate(&codes, Aggregation::Cls), vec![9.0, 9.0]);
    }

    #[test]
    fn hand_corpus_order() {
        // cosines to q=[1,0]: a=[1,1] → 0.7071, b=[0,1] → 0, c=[2,0.1] → 0.99875
        let idx = index(vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![2.0, 0.1]]);
        let hits = idx.query(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![2, 0, 1]);
        assert!((hits[1].similarity - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn self_retrieval_and_scaling() {
        let idx = index(vec![
            vec![1.0, 2.0, 0.0],
            vec![0.5, -1.0, 3.0],
            vec![0.0, 0.0, 1.0],
        ]);
        for (i, d) in idx.descriptors.clone().iter().enumerate() {
            let hits = idx.query(d, 1).unwrap();
            assert_eq!(hits[0].id, i);
            assert!((hits[0].similarity - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = d.iter().map(|v| v * 7.5).collect();
            assert_eq!(
                idx.query(&scaled, 3)
                    .unwrap()
                    .iter()
                    .map(|h| h.id)
                    .collect::<Vec<_>>(),
                idx.query(d, 3)
                    .unwrap()
                    .iter()
                    .map(|h| h.id)
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn ties_zero_norms_and_errors() {
        let idx = LayerIndex::from_descriptors(
            0,
            Aggregation::MeanPatches,
            vec![5, 3, 9],
            vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]],
        )
        .unwrap();
        assert_eq!(idx.zero_descriptors(), 1);
        let hits = idx.query(&[1.0, 0.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![5, 9, 3]);
        assert_eq!(hits[2].similarity, f64::NEG_INFINITY);
        assert!(idx.query(&[0.0, 0.0], 1).is_err());
        assert!(idx.query(&[1.0, 0.0], 0).is_err());
        assert!(idx.query(&[1.0, 0.0], 4).is_err());
    }

    #[test]
    fn reordering_corpus_keeps_result() {
        let desc = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.3, 0.9],
            vec![-1.0, 0.2],
        ];
        let a = LayerIndex::from_descriptors(0, Aggregation::Cls, vec![0, 1, 2, 3], desc.clone())
            .unwrap();
        let b = LayerIndex::from_descriptors(
            0,
            Aggregation::Cls,
            vec![3, 1, 2, 0],
            vec![
                desc[3].clone(),
                desc[1].clone(),
                desc[2].clone(),
                desc[0].clone(),
            ],
        )
        .unwrap();
        assert_eq!(
            a.query(&[0.8, 0.1], 4).unwrap(),
            b.query(&[0.8, 0.1], 4).unwrap()
        );
    }

    #[test]
    fn single_sample_corpus() {
        let idx = index(vec![vec![0.0, 1.0]]);
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.query(&[0.0, 2.0], 1).unwrap()[0].id, 0);
    }
}
