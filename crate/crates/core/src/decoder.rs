//! Non-autoregressive decoding by iterative attribute refinement: groups are
//! completed one at a time, and within a group the least confident
//! predictions are re-masked on a linearly decaying schedule.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LengthPrior;
use crate::error::{Error, Result};
use crate::layout::{
    detokenize, make_conditional_input, Attribute, Group, Layout, LayoutSchema, PartialElement, SlotStatus,
    TokenSequence, MASK_ID,
};
use crate::model::{ModelParams, TokenBatch};

/// Anything that maps a token sequence to per-position logits.
pub trait Scorer {
    fn vocab_size(&self) -> usize;

    /// Row-major `[ids.len(), vocab_size]` logits.
    fn logits(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

impl Scorer for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let batch = TokenBatch::from_ids(&[ids.to_vec()])?;
        Ok(self.forward(&batch)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Predictor {
    Greedy,
    TopK(usize),
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predictor::Greedy => f.write_str("greedy"),
            Predictor::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Predictor::Greedy);
        }
        match s.strip_prefix("topk:").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(Predictor::TopK(k)),
            _ => Err(Error::InvalidInput(format!(
                "predictor must be `greedy` or `topk:<k>` with k >= 1, got {s:?}"
            ))),
        }
    }
}

impl TryFrom<String> for Predictor {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Predictor> for String {
    fn from(p: Predictor) -> String {
        p.to_string()
    }
}

/// Parses a group order such as `CSP`.
pub fn parse_group_order(s: &str) -> Result<Vec<Group>> {
    s.chars()
        .map(|c| Group::from_char(c).ok_or_else(|| Error::InvalidInput(format!("unknown group {c:?} in order {s:?}"))))
        .collect()
}

pub fn format_group_order(order: &[Group]) -> String {
    order.iter().map(|g| g.as_char()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Total iteration budget `T`.
    pub iterations: usize,
    pub group_order: Vec<Group>,
    pub predictor: Predictor,
    pub seed: u64,
    pub trace: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            iterations: 12,
            group_order: Group::ALL.to_vec(),
            predictor: Predictor::Greedy,
            seed: 0,
            trace: false,
        }
    }
}

impl DecodeConfig {
    /// Default settings for unconditional generation: top-5 sampling.
    pub fn unconditional() -> Self {
        DecodeConfig {
            predictor: Predictor::TopK(5),
            ..DecodeConfig::default()
        }
    }

    /// Inner iterations per group, `ceil(T / |groups|)`.
    pub fn per_group_budget(&self) -> usize {
        self.iterations.div_ceil(self.group_order.len().max(1))
    }

    pub fn validate(&self, schema: &LayoutSchema) -> Result<()> {
        let mut order = self.group_order.clone();
        order.sort();
        if order != schema.groups() {
            return Err(Error::InvalidInput(format!(
                "group order {} is not a permutation of the schema groups {}",
                format_group_order(&self.group_order),
                format_group_order(&schema.groups())
            )));
        }
        if self.iterations < self.group_order.len() {
            return Err(Error::InvalidInput(format!(
                "iteration budget {} is smaller than the number of groups {}",
                self.iterations,
                self.group_order.len()
            )));
        }
        Ok(())
    }
}

/// Re-mask count at inner iteration `i` (1-based) of a `t_g`-iteration
/// group with `size` unknown slots: `floor((t_g - i) / t_g * size)`.
pub fn remask_count(t_g: usize, i: usize, size: usize) -> usize {
    (t_g - i) * size / t_g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub position: usize,
    pub token: u32,
    pub confidence: f64,
    pub remasked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub group: Group,
    pub i: usize,
    pub gamma: f64,
    pub n_i: usize,
    pub positions: Vec<PositionRecord>,
    /// Token ids after this iteration, up to and including EOS.
    pub snapshot: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationRecord>,
}

impl DecodeTrace {
    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub sequence: TokenSequence,
    pub trace: DecodeTrace,
    pub forward_passes: usize,
}

fn pick<R: Rng + ?Sized>(row: &[f64], legal: std::ops::Range<u32>, predictor: Predictor, rng: &mut R) -> Result<(u32, f64)> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("model produced non-finite logits".into()));
    }
    let lo = legal.start as usize;
    let cands = &row[legal.start as usize..legal.end as usize];
    match predictor {
        Predictor::Greedy => {
            // first maximum wins, so ties resolve to the lowest token id
            let (best, _) = cands
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            Ok(((lo + best) as u32, (cands[best] - max).exp() / z))
        }
        Predictor::TopK(k) => {
            let mut idx: Vec<usize> = (0..cands.len()).collect();
            idx.sort_by(|&a, &b| cands[b].total_cmp(&cands[a]).then(a.cmp(&b)));
            idx.truncate(k.min(cands.len()));
            let max = cands[idx[0]];
            let w: Vec<f64> = idx.iter().map(|&j| (cands[j] - max).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut r = rng.gen::<f64>() * z;
            let mut chosen = idx.len() - 1;
            for (n, wi) in w.iter().enumerate() {
                if r < *wi {
                    chosen = n;
                    break;
                }
                r -= wi;
            }
            Ok(((lo + idx[chosen]) as u32, w[chosen] / z))
        }
    }
}

/// Completes every UNKNOWN slot of `input`; LOCKED slots pass through.
pub fn refine(scorer: &dyn Scorer, input: &TokenSequence, schema: &LayoutSchema, config: &DecodeConfig) -> Result<Refined> {
    let vocab = schema.vocab();
    if scorer.vocab_size() != vocab.size() {
        return Err(Error::Contract(format!(
            "model vocabulary has {} tokens but the schema needs {}",
            scorer.vocab_size(),
            vocab.size()
        )));
    }
    let unknown: Vec<usize> = input.unknown_positions().collect();
    if unknown.is_empty() {
        return Ok(Refined {
            sequence: input.clone(),
            trace: DecodeTrace::default(),
            forward_passes: 0,
        });
    }
    config.validate(schema)?;
    let mut by_group: Vec<(Group, Vec<(usize, Attribute)>)> =
        config.group_order.iter().map(|&g| (g, Vec::new())).collect();
    for &p in &unknown {
        let (_, attr, group) = input.slots[p]
            .attr()
            .ok_or_else(|| Error::Contract(format!("position {p} is unknown but not an attribute slot")))?;
        let bucket = by_group
            .iter_mut()
            .find(|(g, _)| *g == group)
            .ok_or_else(|| Error::Contract(format!("unknown slot {p} belongs to group {group}, absent from the order")))?;
        bucket.1.push((p, attr));
    }

    let mut seq = input.clone();
    for &p in &unknown {
        seq.ids[p] = MASK_ID;
    }
    let len = seq.unpadded_len();
    let t_g = config.per_group_budget();
    let v = vocab.size();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = DecodeTrace::default();
    let mut passes = 0;

    for (group, slots) in &by_group {
        let size = slots.len();
        if size == 0 {
            continue;
        }
        for i in 1..=t_g {
            let logits = scorer.logits(&seq.ids[..len])?;
            passes += 1;
            if logits.len() != len * v {
                return Err(Error::Contract(format!(
                    "scorer returned {} logits for {len} positions of {v} classes",
                    logits.len()
                )));
            }
            let mut preds = Vec::with_capacity(size);
            for &(p, attr) in slots {
                let (token, confidence) = pick(&logits[p * v..(p + 1) * v], vocab.legal_range(attr), config.predictor, &mut rng)?;
                preds.push((p, token, confidence));
            }
            let n_i = remask_count(t_g, i, size);
            let mut ranked: Vec<usize> = (0..size).collect();
            ranked.sort_by(|&a, &b| preds[b].2.total_cmp(&preds[a].2).then(preds[a].0.cmp(&preds[b].0)));
            let mut remask = vec![false; size];
            for &r in &ranked[size - n_i..] {
                remask[r] = true;
            }
            for (&(p, token, _), &m) in preds.iter().zip(&remask) {
                if m {
                    seq.ids[p] = MASK_ID;
                    seq.slots[p].status = SlotStatus::Unknown;
                } else {
                    seq.ids[p] = token;
                    seq.slots[p].status = SlotStatus::Committed;
                }
            }
            if config.trace {
                trace.iterations.push(IterationRecord {
                    group: *group,
                    i,
                    gamma: (t_g - i) as f64 / t_g as f64,
                    n_i,
                    positions: preds
                        .iter()
                        .zip(&remask)
                        .map(|(&(position, token, confidence), &remasked)| PositionRecord {
                            position,
                            token,
                            confidence,
                            remasked,
                        })
                        .collect(),
                    snapshot: seq.ids[..len].to_vec(),
                });
            }
        }
    }
    Ok(Refined {
        sequence: seq,
        trace,
        forward_passes: passes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub layout: Layout,
    pub trace: DecodeTrace,
    pub forward_passes: usize,
}

/// Completes partially specified elements. Every provided value is
/// returned verbatim.
pub fn generate_conditional(
    scorer: &dyn Scorer,
    elements: &[PartialElement],
    schema: &LayoutSchema,
    config: &DecodeConfig,
) -> Result<Generated> {
    let input = make_conditional_input(elements, schema)?;
    let refined = refine(scorer, &input, schema, config)?;
    let mut layout = detokenize(&refined.sequence, schema)?;
    for (e, given) in layout.elements.iter_mut().zip(elements) {
        if let Some(c) = given.category {
            e.category = c;
        }
        for (slot, v) in [(&mut e.x, given.x), (&mut e.y, given.y), (&mut e.w, given.w), (&mut e.h, given.h)] {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
    Ok(Generated {
        layout,
        trace: refined.trace,
        forward_passes: refined.forward_passes,
    })
}

/// Takes the element count from `prior` (see [`LengthPrior::sample_for_seed`]),
/// then decodes an all-masked layout.
pub fn generate_unconditional(
    scorer: &dyn Scorer,
    prior: &LengthPrior,
    schema: &LayoutSchema,
    config: &DecodeConfig,
) -> Result<Generated> {
    let k = prior.sample_for_seed(config.seed);
    if k == 0 || k > schema.max_elements() {
        return Err(Error::Capacity(format!(
            "prior drew {k} elements; the schema allows 1..={}",
            schema.max_elements()
        )));
    }
    generate_conditional(scorer, &vec![PartialElement::default(); k], schema, config)
}

/// Forward passes spent by the refinement decoder: `|groups| * T_g`,
/// independent of the element count.
pub fn count_model_invocations(config: &DecodeConfig, _num_elements: usize) -> usize {
    config.group_order.len() * config.per_group_budget()
}

/// Forward passes of token-by-token decoding: one per generated token.
pub fn autoregressive_invocations(num_elements: usize) -> usize {
    5 * num_elements + 1
}
