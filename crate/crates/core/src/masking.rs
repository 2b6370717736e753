//! Training-time mask generators: hierarchical group sampling and the
//! fixed-ratio random baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Group, SlotStatus, TokenSequence, MASK_ID};

/// Positions to replace with the mask token. Never empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    positions: Vec<usize>,
    group: Option<Group>,
}

impl MaskPlan {
    pub fn new(mut positions: Vec<usize>, group: Option<Group>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Contract("a mask plan must cover at least one position".into()));
        }
        positions.sort_unstable();
        positions.dedup();
        Ok(MaskPlan { positions, group })
    }

    /// Sorted, distinct positions.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn group(&self) -> Option<Group> {
        self.group
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskPolicy {
    Hierarchical,
    Random { ratio: f64 },
}

impl MaskPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, seq: &TokenSequence, rng: &mut R) -> Result<MaskPlan> {
        match *self {
            MaskPolicy::Hierarchical => sample_hierarchical(seq, rng),
            MaskPolicy::Random { ratio } => sample_random_baseline(seq, rng, ratio),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::Hierarchical => f.write_str("hierarchical"),
            MaskPolicy::Random { ratio } => write!(f, "random:{ratio}"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "hierarchical" {
            return Ok(MaskPolicy::Hierarchical);
        }
        let ratio = s
            .strip_prefix("random:")
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidInput(format!("unknown masking policy {s:?}")))?;
        check_ratio(ratio)?;
        Ok(MaskPolicy::Random { ratio })
    }
}

impl TryFrom<String> for MaskPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskPolicy> for String {
    fn from(p: MaskPolicy) -> String {
        p.to_string()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("mask ratio must lie in (0, 1), got {ratio}")))
    }
}

fn group_positions(seq: &TokenSequence, group: Group) -> Vec<usize> {
    seq.slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.attr().is_some_and(|(_, _, g)| g == group))
        .map(|(i, _)| i)
        .collect()
}

/// Uniform group among those with slots, then `m ~ U{1..|g|}` slots of it.
pub fn sample_hierarchical<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Result<MaskPlan> {
    let groups: Vec<(Group, Vec<usize>)> = Group::ALL
        .into_iter()
        .map(|g| (g, group_positions(seq, g)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::InvalidInput("sequence has no attribute slots to mask".into()));
    }
    let (group, slots) = &groups[rng.gen_range(0..groups.len())];
    choose_in(slots, *group, rng)
}

/// Hierarchical sampling with the group fixed by the caller.
pub fn sample_hierarchical_in<R: Rng + ?Sized>(seq: &TokenSequence, group: Group, rng: &mut R) -> Result<MaskPlan> {
    let slots = group_positions(seq, group);
    if slots.is_empty() {
        return Err(Error::InvalidInput(format!("sequence has no slots in group {group}")));
    }
    choose_in(&slots, group, rng)
}

fn choose_in<R: Rng + ?Sized>(slots: &[usize], group: Group, rng: &mut R) -> Result<MaskPlan> {
    let m = rng.gen_range(1..=slots.len());
    let picked = sample(rng, slots.len(), m).into_iter().map(|i| slots[i]).collect();
    MaskPlan::new(picked, Some(group))
}

/// `ceil(ratio * #attr)` attribute slots, uniformly, ignoring groups.
pub fn sample_random_baseline<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R, ratio: f64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let slots: Vec<usize> = seq.attr_positions().collect();
    if slots.is_empty() {
        return Err(Error::InvalidInput("sequence has no attribute slots to mask".into()));
    }
    let m = ((ratio * slots.len() as f64).ceil() as usize).clamp(1, slots.len());
    let picked = sample(rng, slots.len(), m).into_iter().map(|i| slots[i]).collect();
    MaskPlan::new(picked, None)
}

/// Masks the planned positions; returns the masked sequence and the original
/// token at each of them.
pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan) -> Result<(TokenSequence, BTreeMap<usize, u32>)> {
    let mut out = seq.clone();
    let mut targets = BTreeMap::new();
    for &p in plan.positions() {
        let slot = out
            .slots
            .get_mut(p)
            .ok_or_else(|| Error::Contract(format!("mask position {p} is past the sequence end")))?;
        if !slot.is_attr() {
            return Err(Error::Contract(format!("mask position {p} is not an attribute slot")));
        }
        targets.insert(p, out.ids[p]);
        out.ids[p] = MASK_ID;
        slot.status = SlotStatus::Unknown;
    }
    Ok((out, targets))
}
