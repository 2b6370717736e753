//! Decoding-speed benchmark: refinement decoding against a simulated
//! token-by-token decoder that runs the same network once per token.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{autoregressive_invocations, count_model_invocations, refine, DecodeConfig, Scorer};
use crate::error::{Error, Result};
use crate::layout::{make_conditional_input, LayoutSchema, PartialElement, MASK_ID};
use crate::metrics::MetricSummary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
}

impl Timing {
    fn from_ms(samples: &[f64]) -> Self {
        let s = MetricSummary::from_values(samples).expect("at least one repeat");
        Timing { mean: s.mean, std: s.std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub objects: usize,
    pub nar_invocations: usize,
    pub ar_invocations: usize,
    /// Forward passes the refinement decoder actually issued.
    pub nar_forward_passes: usize,
    pub nar_wall_ms: Timing,
    pub ar_sim_wall_ms: Timing,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, objects: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.objects == objects)
    }
}

/// Greedy token-by-token completion of a `k`-element all-masked sequence in
/// attribute order: one full-length forward pass per generated token plus
/// one for the end token. Returns the number of passes.
pub fn simulate_autoregressive(scorer: &dyn Scorer, schema: &LayoutSchema, k: usize) -> Result<usize> {
    let mut seq = make_conditional_input(&vec![PartialElement::default(); k], schema)?;
    let len = seq.unpadded_len();
    let vocab = schema.vocab();
    let v = vocab.size();
    let mut passes = 0;
    for p in 1..len {
        let logits = scorer.logits(&seq.ids[..len])?;
        passes += 1;
        if let Some((_, attr, _)) = seq.slots[p].attr() {
            let range = vocab.legal_range(attr);
            let row = &logits[p * v..(p + 1) * v];
            let best = range
                .clone()
                .max_by(|&a, &b| row[a as usize].total_cmp(&row[b as usize]).then(b.cmp(&a)))
                .unwrap_or(range.start);
            debug_assert_eq!(seq.ids[p], MASK_ID);
            seq.ids[p] = best;
        }
    }
    debug_assert!(seq.attr_positions().all(|p| seq.ids[p] != MASK_ID));
    Ok(passes)
}

/// Times both decoders `repeats` times at each element count.
pub fn run_bench(
    scorer: &dyn Scorer,
    schema: &LayoutSchema,
    objects: &[usize],
    repeats: usize,
    config: &DecodeConfig,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be at least 1".into()));
    }
    config.validate(schema)?;
    let mut rows = Vec::with_capacity(objects.len());
    for &k in objects {
        if k == 0 || k > schema.max_elements() {
            return Err(Error::Capacity(format!(
                "cannot benchmark {k} objects; the model handles 1..={}",
                schema.max_elements()
            )));
        }
        let input = make_conditional_input(&vec![PartialElement::default(); k], schema)?;
        let mut nar = Vec::with_capacity(repeats);
        let mut ar = Vec::with_capacity(repeats);
        let mut nar_passes = 0;
        let mut ar_passes = 0;
        for r in 0..repeats {
            let cfg = DecodeConfig {
                seed: config.seed.wrapping_add(r as u64),
                trace: false,
                ..config.clone()
            };
            let t = Instant::now();
            nar_passes = refine(scorer, &input, schema, &cfg)?.forward_passes;
            nar.push(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            ar_passes = simulate_autoregressive(scorer, schema, k)?;
            ar.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let expected_ar = autoregressive_invocations(k);
        if ar_passes != expected_ar {
            return Err(Error::Contract(format!(
                "simulated decoder issued {ar_passes} passes, expected {expected_ar}"
            )));
        }
        let nar_wall_ms = Timing::from_ms(&nar);
        let ar_sim_wall_ms = Timing::from_ms(&ar);
        rows.push(BenchRow {
            objects: k,
            nar_invocations: count_model_invocations(config, k),
            ar_invocations: expected_ar,
            nar_forward_passes: nar_passes,
            speedup: ar_sim_wall_ms.mean / nar_wall_ms.mean.max(f64::MIN_POSITIVE),
            nar_wall_ms,
            ar_sim_wall_ms,
        });
    }
    Ok(BenchReport {
        iterations: config.iterations,
        repeats,
        rows,
    })
}
