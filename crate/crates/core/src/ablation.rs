//! Directional ablations: masking policy and decoding group order, each
//! trained from independent seeds and scored on generated test layouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_corpus, LayoutCorpus, SyntheticStyle};
use crate::decoder::{format_group_order, generate_conditional, DecodeConfig, Predictor};
use crate::error::{Error, Result};
use crate::layout::{Group, Layout, LayoutSchema, PartialElement};
use crate::masking::MaskPolicy;
use crate::metrics::{alignment, overlap, perceptual_iou, MetricSummary};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::training::{TrainConfig, TrainState, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic {
        n: usize,
        seed: u64,
        #[serde(default)]
        style: SyntheticStyle,
    },
    File {
        path: String,
        schema: LayoutSchema,
    },
}

impl CorpusSource {
    pub fn load(&self) -> Result<LayoutCorpus> {
        match self {
            CorpusSource::Synthetic { n, seed, style } => generate_synthetic(*n, *seed, style),
            CorpusSource::File { path, schema } => load_corpus(path, schema),
        }
    }
}

/// Which attributes of each test layout are given to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Category,
    CategorySize,
    /// Only the element count is taken from the test layout.
    ElementCount,
}

impl Condition {
    pub fn known_groups(self) -> &'static [Group] {
        match self {
            Condition::Category => &[Group::C],
            Condition::CategorySize => &[Group::C, Group::S],
            Condition::ElementCount => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub policy: MaskPolicy,
    pub group_order: Vec<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub corpus: CorpusSource,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub condition: Condition,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// Caps the number of test layouts decoded per trial.
    #[serde(default)]
    pub max_test_layouts: Option<usize>,
}

fn default_trials() -> usize {
    3
}

impl AblationSpec {
    /// Variants must differ from the first in exactly one factor.
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.trials == 0 {
            return Err(Error::InvalidInput("ablation needs at least one variant and one trial".into()));
        }
        let base = &self.variants[0];
        for v in &self.variants[1..] {
            let diffs = (v.policy != base.policy) as usize + (v.group_order != base.group_order) as usize;
            if diffs > 1 {
                return Err(Error::InvalidInput(format!(
                    "variant {} differs from {} in more than one factor",
                    v.name, base.name
                )));
            }
        }
        self.train.validate()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed_base.wrapping_add(trial as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub metrics: Option<BTreeMap<String, f64>>,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub policy: MaskPolicy,
    pub group_order: String,
    pub trials: Vec<TrialResult>,
    pub summary: BTreeMap<String, MetricSummary>,
    pub flagged: bool,
}

impl VariantResult {
    /// Per-trial values of `metric`, `None` for diverged trials.
    pub fn per_trial(&self, metric: &str) -> Vec<Option<f64>> {
        self.trials
            .iter()
            .map(|t| t.metrics.as_ref().and_then(|m| m.get(metric).copied()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub condition: Condition,
    pub variants: Vec<VariantResult>,
}

pub const ABLATION_METRICS: [&str; 3] = ["iou", "overlap", "alignment"];

impl AblationTable {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Trials in which `a`'s metric is at most `b`'s.
    pub fn wins(&self, a: &str, b: &str, metric: &str) -> Option<usize> {
        let (va, vb) = (self.variant(a)?, self.variant(b)?);
        Some(
            va.per_trial(metric)
                .into_iter()
                .zip(vb.per_trial(metric))
                .filter(|(x, y)| matches!((x, y), (Some(x), Some(y)) if x <= y))
                .count(),
        )
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | policy | order |");
        for m in ABLATION_METRICS {
            let _ = write!(out, " {m} |");
        }
        out.push_str("\n|---|---|---|");
        out.push_str(&"---|".repeat(ABLATION_METRICS.len()));
        out.push('\n');
        for v in &self.variants {
            let _ = write!(out, "| {}{} | {} | {} |", v.name, if v.flagged { " (!)" } else { "" }, v.policy, v.group_order);
            for m in ABLATION_METRICS {
                match v.summary.get(m) {
                    Some(s) => {
                        let _ = write!(out, " {:.4} ± {:.4} |", s.mean, s.std);
                    }
                    None => out.push_str(" n/a |"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `table.md`, `table.json` and one JSON file per variant.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("table.md".into(), self.to_markdown())?;
        put("table.json".into(), serde_json::to_string_pretty(self)?)?;
        for v in &self.variants {
            let file: String = v.name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            put(format!("{file}.json"), serde_json::to_string_pretty(v)?)?;
        }
        Ok(())
    }
}

/// Trained models keyed by everything that determines them, so variants
/// that share a training setup train once.
#[derive(Default)]
pub struct ModelCache {
    models: BTreeMap<String, std::result::Result<ModelParams, String>>,
}

impl ModelCache {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    fn key(corpus: &LayoutCorpus, train: &TrainConfig) -> std::result::Result<String, String> {
        let train = serde_json::to_string(train).map_err(|e| e.to_string())?;
        Ok(format!("{}|{train}", corpus.provenance))
    }

    /// Registers an already trained model, e.g. one loaded from a checkpoint.
    pub fn insert(&mut self, corpus: &LayoutCorpus, train: &TrainConfig, params: ModelParams) -> std::result::Result<(), String> {
        self.models.insert(Self::key(corpus, train)?, Ok(params));
        Ok(())
    }

    /// Trains (or reuses) a desk-config model on the corpus training split.
    pub fn get_or_train(&mut self, corpus: &LayoutCorpus, train: &TrainConfig) -> std::result::Result<ModelParams, String> {
        self.models
            .entry(Self::key(corpus, train)?)
            .or_insert_with(|| train_desk_model(corpus, train).map_err(|e| e.to_string()))
            .clone()
    }
}

/// Desk-config model initialised from `train.seed` and trained on the
/// training split.
pub fn train_desk_model(corpus: &LayoutCorpus, train: &TrainConfig) -> Result<ModelParams> {
    let config = ModelConfig::desk(&corpus.schema);
    let params = init_params(&config, train.seed)?;
    let data: Vec<Layout> = corpus.train().into_iter().cloned().collect();
    let mut trainer = Trainer::new(TrainState::new(params), corpus.schema.clone(), data, train.clone())?;
    trainer.run(&[], |_| Ok(()))?;
    Ok(trainer.state.params)
}

fn score_trial(
    params: &ModelParams,
    corpus: &LayoutCorpus,
    spec: &AblationSpec,
    variant: &Variant,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let test = corpus.test();
    let take = spec.max_test_layouts.unwrap_or(test.len()).min(test.len());
    if take == 0 {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let mut sums = [0.0; 3];
    for (i, layout) in test.iter().take(take).enumerate() {
        let parts: Vec<PartialElement> = layout
            .elements
            .iter()
            .map(|e| PartialElement::from_element(e, spec.condition.known_groups(), &corpus.schema))
            .collect();
        let config = DecodeConfig {
            group_order: variant.group_order.clone(),
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            trace: false,
            ..spec.decode.clone()
        };
        let g = generate_conditional(params, &parts, &corpus.schema, &config)?.layout;
        sums[0] += perceptual_iou(&g);
        sums[1] += overlap(&g);
        sums[2] += alignment(&g);
    }
    Ok(ABLATION_METRICS
        .iter()
        .zip(sums)
        .map(|(m, s)| (m.to_string(), s / take as f64))
        .collect())
}

pub fn run_ablation(spec: &AblationSpec, cache: &mut ModelCache) -> Result<AblationTable> {
    spec.validate()?;
    let corpus = spec.corpus.load()?;
    let mut variants = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        let mut trials = Vec::with_capacity(spec.trials);
        for t in 0..spec.trials {
            let seed = spec.trial_seed(t);
            let train = TrainConfig {
                seed,
                policy: v.policy,
                ..spec.train.clone()
            };
            let outcome = cache
                .get_or_train(&corpus, &train)
                .and_then(|params| score_trial(&params, &corpus, spec, v, seed).map_err(|e| e.to_string()));
            trials.push(match outcome {
                Ok(metrics) => TrialResult {
                    seed,
                    metrics: Some(metrics),
                    diverged: None,
                },
                Err(e) => TrialResult {
                    seed,
                    metrics: None,
                    diverged: Some(e),
                },
            });
        }
        let mut summary = BTreeMap::new();
        for m in ABLATION_METRICS {
            let vals: Vec<f64> = trials.iter().filter_map(|t| t.metrics.as_ref()?.get(m).copied()).collect();
            if let Some(s) = MetricSummary::from_values(&vals) {
                summary.insert(m.to_string(), s);
            }
        }
        variants.push(VariantResult {
            name: v.name.clone(),
            policy: v.policy,
            group_order: format_group_order(&v.group_order),
            flagged: trials.iter().any(|t| t.diverged.is_some()),
            trials,
            summary,
        });
    }
    Ok(AblationTable {
        condition: spec.condition,
        variants,
    })
}

/// Shared decoding for both ablations. Greedy parallel decoding from a
/// near-empty condition gives every same-category element the same argmax,
/// so the scores would mostly measure duplicate boxes; top-5 sampling avoids
/// that.
fn ablation_decode() -> DecodeConfig {
    DecodeConfig {
        predictor: Predictor::TopK(5),
        ..DecodeConfig::default()
    }
}

/// Hierarchical vs random(0.15) masking, decoded under the Category condition.
pub fn sampling_policy_spec(corpus: CorpusSource, train: TrainConfig) -> AblationSpec {
    let order = Group::ALL.to_vec();
    AblationSpec {
        corpus,
        variants: vec![
            Variant {
                name: "hierarchical".into(),
                policy: MaskPolicy::Hierarchical,
                group_order: order.clone(),
            },
            Variant {
                name: "random-0.15".into(),
                policy: MaskPolicy::Random { ratio: 0.15 },
                group_order: order,
            },
        ],
        train,
        decode: ablation_decode(),
        condition: Condition::Category,
        trials: 3,
        seed_base: 0,
        max_test_layouts: None,
    }
}

/// C→S→P vs S→P→C with hierarchical training. Only the element count is
/// given, since a locked category group would make both orders identical.
pub fn group_order_spec(corpus: CorpusSource, train: TrainConfig) -> AblationSpec {
    AblationSpec {
        corpus,
        variants: vec![
            Variant {
                name: "CSP".into(),
                policy: MaskPolicy::Hierarchical,
                group_order: vec![Group::C, Group::S, Group::P],
            },
            Variant {
                name: "SPC".into(),
                policy: MaskPolicy::Hierarchical,
                group_order: vec![Group::S, Group::P, Group::C],
            },
        ],
        train,
        decode: ablation_decode(),
        condition: Condition::ElementCount,
        trials: 3,
        seed_base: 0,
        max_test_layouts: None,
    }
}
