//! TOML run configuration shared by every pipeline stage.
//!
//! ```toml
//! seed = 7
//!
//! [teacher]
//! layers = 6
//! tokens = 10
//! hidden = 32
//! heads = 4
//! num_classes = 10
//!
//! [data]
//! samples = 2000
//! val_fraction = 0.1
//!
//! [clt]
//! sparsifier = "relu_top_k"
//! k = 64
//!
//! [train]
//! epochs = 10
//!
//! [eval]
//! ranges = ["none", "5-5", "0-5"]
//! routings = ["all", "cls", "patches"]
//! ```
//!
//! Unknown keys are rejected. Every random stream is derived from the single
//! top-level `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ablation::AblationMode;
use crate::attribution::TokenClass;
use crate::clt::DEFAULT_EXPANSION;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::replacement::{LogitScaling, ReplacementPlan};
use crate::retrieval::Aggregation;
use crate::sparsify::{SparsifierKind, SparsifierSpec, DEFAULT_BANDWIDTH};
use crate::trainer::TrainConfig;
use crate::vit::VitConfig;

const STREAM_TEACHER: u64 = 0x7E;
const STREAM_DATA: u64 = 0xDA;
const STREAM_SPLIT: u64 = 0x5B;
const STREAM_CLT: u64 = 0xC1;
const STREAM_TRAIN: u64 = 0x7A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub layers: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_signal")]
    pub class_signal: f32,
    #[serde(default = "default_noise")]
    pub patch_noise: f32,
}

fn default_signal() -> f32 {
    1.0
}
fn default_noise() -> f32 {
    1.0
}
fn default_samples() -> usize {
    2000
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_sparsifier() -> SparsifierKind {
    SparsifierKind::ReluTopK
}
fn default_expansion() -> usize {
    DEFAULT_EXPANSION
}
fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}
fn default_modes() -> Vec<String> {
    vec!["full".into(), "drop1".into(), "keep4".into()]
}
fn default_routings() -> Vec<TokenClass> {
    vec![TokenClass::All]
}
fn default_ablation_tokens() -> TokenClass {
    TokenClass::All
}
fn default_attribution_tokens() -> TokenClass {
    TokenClass::Patches
}
fn default_retrieval_k() -> usize {
    5
}
fn default_aggregation() -> Aggregation {
    Aggregation::MeanPatches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fraction of samples used for training; the rest is held out.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            val_fraction: default_val_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    #[serde(default = "default_sparsifier")]
    pub sparsifier: SparsifierKind,
    /// Top-k budget; defaults to `features / 8`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default)]
    pub diagonal_only: bool,
}

impl Default for CltSection {
    fn default() -> Self {
        Self {
            sparsifier: default_sparsifier(),
            k: None,
            bandwidth: default_bandwidth(),
            expansion: default_expansion(),
            diagonal_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Replacement ranges such as `"3-5"` or `"none"`. Defaults to `none`
    /// plus every `s-(L-1)`.
    #[serde(default)]
    pub ranges: Option<Vec<String>>,
    #[serde(default = "default_routings")]
    pub routings: Vec<TokenClass>,
    #[serde(default)]
    pub logits: LogitScaling,
    #[serde(default = "default_modes")]
    pub ablation_modes: Vec<String>,
    #[serde(default = "default_ablation_tokens")]
    pub ablation_tokens: TokenClass,
    #[serde(default = "default_attribution_tokens")]
    pub attribution_tokens: TokenClass,
    /// Defaults to the last layer.
    #[serde(default)]
    pub retrieval_layer: Option<usize>,
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    #[serde(default = "default_aggregation")]
    pub retrieval_aggregation: Aggregation,
    #[serde(default)]
    pub query: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ranges: None,
            routings: default_routings(),
            logits: LogitScaling::default(),
            ablation_modes: default_modes(),
            ablation_tokens: default_ablation_tokens(),
            attribution_tokens: default_attribution_tokens(),
            retrieval_layer: None,
            retrieval_k: default_retrieval_k(),
            retrieval_aggregation: default_aggregation(),
            query: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub teacher: TeacherSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub clt: CltSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// The seeded desk-scale instance: 6 layers, 10 tokens, width 32,
    /// 10 classes, 2000 samples, ReLU-top-k with k = m/8.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            teacher: TeacherSection {
                layers: 6,
                tokens: 10,
                hidden: 32,
                heads: 4,
                num_classes: 10,
                mlp_hidden: None,
                class_signal: default_signal(),
                patch_noise: default_noise(),
            },
            data: DataSection::default(),
            clt: CltSection::default(),
            train: TrainConfig {
                sparsity_coeff: 0.0,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.vit_config().validate().map_err(config)?;
        self.sparsifier()
            .validate(self.features())
            .map_err(config)?;
        self.train.validate().map_err(config)?;
        if self.clt.expansion == 0 {
            return Err(Error::Config("clt.expansion must be >= 1".into()));
        }
        if self.data.samples < 2 {
            return Err(Error::Config("data.samples must be >= 2".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must be in (0, 1)".into()));
        }
        self.plans().map_err(config)?;
        self.ablation_modes().map_err(config)?;
        if let Some(l) = self.eval.retrieval_layer {
            if l >= self.teacher.layers {
                return Err(Error::Config(format!(
                    "eval.retrieval_layer {l} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        let t = &self.teacher;
        VitConfig {
            layers: t.layers,
            tokens: t.tokens,
            hidden: t.hidden,
            mlp_hidden: t.mlp_hidden,
            heads: t.heads,
            num_classes: t.num_classes,
            seed: derive_seed(self.seed, STREAM_TEACHER),
            class_signal: t.class_signal,
            patch_noise: t.patch_noise,
        }
    }

    pub fn features(&self) -> usize {
        self.clt.expansion * self.teacher.hidden
    }

    pub fn sparsifier(&self) -> SparsifierSpec {
        let k = self.clt.k.unwrap_or((self.features() / 8).max(1));
        SparsifierSpec {
            kind: self.clt.sparsifier,
            k: if matches!(
                self.clt.sparsifier,
                SparsifierKind::ReluTopK | SparsifierKind::AbsTopK
            ) {
                k
            } else {
                0
            },
            bandwidth: self.clt.bandwidth,
        }
    }

    /// Training settings with the derived training seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, STREAM_TRAIN),
            ..self.train.clone()
        }
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_DATA)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_SPLIT)
    }

    pub fn clt_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_CLT)
    }

    /// Every (range, routing) combination to evaluate.
    pub fn plans(&self) -> Result<Vec<ReplacementPlan>> {
        let l = self.teacher.layers;
        let ranges = match &self.eval.ranges {
            Some(r) => r.clone(),
            None => std::iter::once("none".to_string())
                .chain((0..l).rev().map(|s| format!("{s}-{}", l - 1)))
                .collect(),
        };
        let mut plans = Vec::new();
        for r in &ranges {
            let range = crate::replacement::parse_range(r)?;
            for &routing in &self.eval.routings {
                let plan = ReplacementPlan { range, routing };
                plan.validate(l)?;
                plans.push(plan);
            }
        }
        Ok(plans)
    }

    pub fn ablation_modes(&self) -> Result<Vec<AblationMode>> {
        self.eval
            .ablation_modes
            .iter()
            .map(|m| {
                let mode: AblationMode = m.parse()?;
                mode.validate(self.teacher.layers)?;
                Ok(mode)
            })
            .collect()
    }

    pub fn retrieval_layer(&self) -> usize {
        self.eval.retrieval_layer.unwrap_or(self.teacher.layers - 1)
    }
}
