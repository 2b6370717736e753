//! Corpus ingestion (JSONL), deterministic synthetic UI layouts, hashed
//! train/val/test splits and the empirical object-count prior.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Element, Layout, LayoutJson, LayoutSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 80/10/10 assignment by a hash of the record index.
pub fn split_for_index(index: usize) -> Split {
    match splitmix64(index as u64) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutCorpus {
    pub schema: LayoutSchema,
    records: Vec<Layout>,
    splits: Vec<Split>,
    pub provenance: String,
}

impl LayoutCorpus {
    /// Assigns splits by record index.
    pub fn new(schema: LayoutSchema, records: Vec<Layout>, provenance: impl Into<String>) -> Result<Self> {
        for (i, l) in records.iter().enumerate() {
            l.validate(&schema)
                .map_err(|e| Error::InvalidInput(format!("record {i}: {e}")))?;
        }
        let splits = (0..records.len()).map(split_for_index).collect();
        Ok(LayoutCorpus {
            schema,
            records,
            splits,
            provenance: provenance.into(),
        })
    }

    pub fn records(&self) -> &[Layout] {
        &self.records
    }

    pub fn split(&self, which: Split) -> Vec<&Layout> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(l, _)| l)
            .collect()
    }

    pub fn train(&self) -> Vec<&Layout> {
        self.split(Split::Train)
    }

    pub fn val(&self) -> Vec<&Layout> {
        self.split(Split::Val)
    }

    pub fn test(&self) -> Vec<&Layout> {
        self.split(Split::Test)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for l in &self.records {
            out.push_str(&serde_json::to_string(&LayoutJson::from_layout(l, &self.schema))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Outcome of reading a JSONL corpus. Every line lands in exactly one list.
#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub loaded: Vec<Layout>,
    /// `(line number, reason)` for malformed or invalid records.
    pub rejected: Vec<(usize, String)>,
    /// Line numbers of valid records with more elements than the schema allows.
    pub filtered: Vec<usize>,
}

impl IngestReport {
    pub fn lines(&self) -> usize {
        self.loaded.len() + self.rejected.len() + self.filtered.len()
    }
}

pub fn ingest_jsonl(text: &str, schema: &LayoutSchema) -> IngestReport {
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let parsed: std::result::Result<LayoutJson, _> = serde_json::from_str(line);
        match parsed {
            Err(e) => report.rejected.push((n, format!("unparseable record: {e}"))),
            Ok(json) if json.elements.len() > schema.max_elements() => report.filtered.push(n),
            Ok(json) => match json.to_layout(schema) {
                Ok(l) => report.loaded.push(l),
                Err(e) => report.rejected.push((n, e.to_string())),
            },
        }
    }
    report
}

/// Reads one layout JSON object per line. Records with more elements than
/// `schema.max_elements` are dropped; any malformed line fails the load.
pub fn load_corpus(path: impl AsRef<Path>, schema: &LayoutSchema) -> Result<LayoutCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = ingest_jsonl(&text, schema);
    if !report.rejected.is_empty() {
        return Err(Error::Ingestion(report.rejected));
    }
    LayoutCorpus::new(schema.clone(), report.loaded, path.display().to_string())
}

/// Knobs for the synthetic mobile-UI generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    pub min_items: usize,
    pub max_items: usize,
    /// Per-coordinate uniform jitter amplitude, in bins.
    pub jitter_bins: f64,
    pub num_bins: u32,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        SyntheticStyle {
            min_items: 1,
            max_items: 6,
            jitter_bins: 0.25,
            num_bins: 32,
        }
    }
}

pub const SYNTHETIC_CATEGORIES: [&str; 5] = ["header", "footer", "text", "image", "button"];

impl SyntheticStyle {
    pub fn schema(&self) -> Result<LayoutSchema> {
        LayoutSchema::new(
            SYNTHETIC_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            self.num_bins,
            self.max_items + 2,
        )
    }
}

fn synthetic_layout(rng: &mut ChaCha8Rng, style: &SyntheticStyle) -> Layout {
    let header_h = *[0.08, 0.1, 0.12].choose(rng).expect("non-empty");
    let footer_h = *[0.06, 0.08, 0.1].choose(rng).expect("non-empty");
    let n_items = rng.gen_range(style.min_items..=style.max_items);
    let left = rng.gen_range(0.04..0.12);
    let width = rng.gen_range(0.5..0.9);
    let gap = rng.gen_range(0.01..0.03);
    let room = 1.0 - header_h - footer_h - gap * (n_items as f64 + 1.0);
    let item_h = rng.gen_range(0.06..0.12f64).min(room / n_items as f64);

    let mut elements = vec![Element::new(0, 0.5, header_h / 2.0, 1.0, header_h)];
    for i in 0..n_items {
        let top = header_h + gap + i as f64 * (item_h + gap);
        let category = rng.gen_range(2..5);
        elements.push(Element::new(category, left + width / 2.0, top + item_h / 2.0, width, item_h));
    }
    elements.push(Element::new(1, 0.5, 1.0 - footer_h / 2.0, 1.0, footer_h));

    let amp = style.jitter_bins / style.num_bins as f64;
    for e in &mut elements {
        if amp > 0.0 {
            for v in [&mut e.x, &mut e.y, &mut e.w, &mut e.h] {
                *v += rng.gen_range(-amp..=amp);
            }
        }
        e.quantize_in_place(style.num_bins).expect("finite synthetic coordinates");
    }
    Layout::new(elements)
}

/// Header on top, footer at the bottom and 1–6 left-aligned, equally wide
/// list items stacked between them. Pure function of `(n, seed, style)`.
pub fn generate_synthetic(n: usize, seed: u64, style: &SyntheticStyle) -> Result<LayoutCorpus> {
    if n == 0 {
        return Err(Error::InvalidInput("synthetic corpus size must be at least 1".into()));
    }
    if style.min_items == 0 || style.min_items > style.max_items {
        return Err(Error::InvalidInput(format!(
            "item range {}..={} is empty or starts at zero",
            style.min_items, style.max_items
        )));
    }
    let schema = style.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n).map(|_| synthetic_layout(&mut rng, style)).collect();
    LayoutCorpus::new(schema, records, format!("synthetic(n={n}, seed={seed})"))
}

/// `2^64 / phi`, rounded to odd.
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Empirical distribution of object counts over a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthPrior {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
}

impl LengthPrior {
    pub fn from_counts(counts: BTreeMap<usize, u64>) -> Result<Self> {
        let counts: BTreeMap<_, _> = counts.into_iter().filter(|(_, c)| *c > 0).collect();
        let total = counts.values().sum();
        if total == 0 {
            return Err(Error::InvalidInput("length prior needs at least one observation".into()));
        }
        if counts.contains_key(&0) {
            return Err(Error::InvalidInput("length prior cannot contain zero-element layouts".into()));
        }
        Ok(LengthPrior { counts, total })
    }

    pub fn probability(&self, k: usize) -> f64 {
        self.counts.get(&k).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.keys().copied()
    }

    pub fn max_len(&self) -> usize {
        self.counts.keys().next_back().copied().unwrap_or(0)
    }

    fn pick(&self, mut r: u64) -> usize {
        for (&k, &c) in &self.counts {
            if r < c {
                return k;
            }
            r -= c;
        }
        unreachable!("r < total")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.pick(rng.gen_range(0..self.total))
    }

    /// The count assigned to `seed`: the inverse CDF at the `seed`-th point
    /// of a golden-ratio Weyl sequence. Over a uniformly random seed this is
    /// a draw from the prior; over any run of consecutive seeds the counts
    /// match the prior to within O(log n / n) per value.
    pub fn sample_for_seed(&self, seed: u64) -> usize {
        let u = seed.wrapping_mul(GOLDEN_GAMMA);
        self.pick(((u as u128 * self.total as u128) >> 64) as u64)
    }

    /// Total-variation distance to an empirical sample of counts.
    pub fn total_variation(&self, samples: &[usize]) -> f64 {
        let mut emp: BTreeMap<usize, f64> = BTreeMap::new();
        for &k in samples {
            *emp.entry(k).or_default() += 1.0 / samples.len() as f64;
        }
        let keys: std::collections::BTreeSet<usize> = emp.keys().chain(self.counts.keys()).copied().collect();
        0.5 * keys
            .into_iter()
            .map(|k| (emp.get(&k).copied().unwrap_or(0.0) - self.probability(k)).abs())
            .sum::<f64>()
    }
}

pub fn estimate_length_prior(corpus: &LayoutCorpus) -> Result<LengthPrior> {
    let train = corpus.train();
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let mut counts = BTreeMap::new();
    for l in train {
        *counts.entry(l.elements.len()).or_insert(0) += 1;
    }
    LengthPrior::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::alignment;

    #[test]
    fn splits_are_roughly_80_10_10() {
        let n = 10_000;
        let train = (0..n).filter(|&i| split_for_index(i) == Split::Train).count();
        let val = (0..n).filter(|&i| split_for_index(i) == Split::Val).count();
        assert!((7_700..8_300).contains(&train), "{train}");
        assert!((800..1_200).contains(&val), "{val}");
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = generate_synthetic(10, 7, &SyntheticStyle::default()).unwrap();
        let b = generate_synthetic(10, 7, &SyntheticStyle::default()).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = generate_synthetic(10, 8, &SyntheticStyle::default()).unwrap();
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
        assert!(generate_synthetic(0, 7, &SyntheticStyle::default()).is_err());
    }

    #[test]
    fn synthetic_layouts_have_one_header_on_top() {
        let c = generate_synthetic(300, 1, &SyntheticStyle::default()).unwrap();
        for l in c.records() {
            let headers: Vec<_> = l.elements.iter().filter(|e| e.category == 0).collect();
            assert_eq!(headers.len(), 1);
            assert!(headers[0].bins.unwrap()[1] < 8);
            assert!((3..=8).contains(&l.elements.len()));
            assert!(l.validate(&c.schema).is_ok());
        }
    }

    #[test]
    fn synthetic_layouts_are_better_aligned_than_randomized_ones() {
        let c = generate_synthetic(200, 3, &SyntheticStyle::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut real, mut shuffled) = (0.0, 0.0);
        for l in c.records() {
            real += alignment(l);
            let mut r = l.clone();
            for e in &mut r.elements {
                let b = rng.gen_range(0..32);
                e.x = crate::layout::dequantize(b, 32).unwrap();
                e.bins.as_mut().unwrap()[0] = b;
            }
            shuffled += alignment(&r);
        }
        assert!(real < shuffled, "{real} vs {shuffled}");
    }

    #[test]
    fn ingestion_reports_lines() {
        let schema = SyntheticStyle::default().schema().unwrap();
        let good = r#"{"canvas":{"w":1,"h":1},"elements":[{"category":"text","x":0.5,"y":0.5,"w":0.2,"h":0.1}]}"#;
        let text = format!("{good}\n{good}\n{good}\n");
        let r = ingest_jsonl(&text, &schema);
        assert_eq!(r.loaded.len(), 3);
        assert_eq!(r.lines(), 3);

        let bad = r#"{"canvas":{"w":1,"h":1},"elements":[{"category":"blimp","x":0.5,"y":0.5,"w":0.2,"h":0.1}]}"#;
        let text = format!("{good}\n{bad}\nnot json\n");
        let r = ingest_jsonl(&text, &schema);
        assert_eq!(r.loaded.len(), 1);
        assert_eq!(r.rejected.len(), 2);
        assert_eq!(r.rejected[0].0, 2);
        assert!(r.rejected[0].1.contains("blimp"));
        assert_eq!(r.rejected[1].0, 3);
        assert_eq!(r.lines(), 3);
    }

    #[test]
    fn load_corpus_fails_naming_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let schema = SyntheticStyle::default().schema().unwrap();
        let good = r#"{"canvas":{"w":1,"h":1},"elements":[{"category":"text","x":0.5,"y":0.5,"w":0.2,"h":0.1}]}"#;
        let bad = r#"{"canvas":{"w":1,"h":1},"elements":[{"category":"blimp","x":0.5,"y":0.5,"w":0.2,"h":0.1}]}"#;
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = load_corpus(&path, &schema).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("blimp"), "{err}");

        fs::write(&path, format!("{good}\n{good}\n{good}\n")).unwrap();
        assert_eq!(load_corpus(&path, &schema).unwrap().len(), 3);
    }

    #[test]
    fn written_corpus_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = generate_synthetic(25, 5, &SyntheticStyle::default()).unwrap();
        c.write_jsonl(&path).unwrap();
        let back = load_corpus(&path, &c.schema).unwrap();
        for (a, b) in c.records().iter().zip(back.records()) {
            let qa: Vec<_> = a.elements.iter().map(|e| (e.category, e.bins)).collect();
            let qb: Vec<_> = b.elements.iter().map(|e| (e.category, e.bins)).collect();
            assert_eq!(qa, qb);
        }
    }

    #[test]
    fn prior_from_counts() {
        let schema = SyntheticStyle::default().schema().unwrap();
        let mk = |k: usize| Layout::new(vec![Element::new(2, 0.5, 0.5, 0.1, 0.1); k]);
        // choose record indices that hash into the training split
        let train_idx: Vec<usize> = (0..100).filter(|&i| split_for_index(i) == Split::Train).take(4).collect();
        let mut records = vec![mk(1); train_idx[3] + 1];
        for (j, &i) in train_idx.iter().enumerate() {
            records[i] = mk(if j < 3 { 2 } else { 3 });
        }
        for (i, r) in records.iter_mut().enumerate() {
            if !train_idx.contains(&i) {
                *r = mk(5);
                assert_ne!(split_for_index(i), Split::Train);
            }
        }
        let corpus = LayoutCorpus::new(schema, records, "t").unwrap();
        let prior = estimate_length_prior(&corpus).unwrap();
        assert_eq!(prior.probability(2), 0.75);
        assert_eq!(prior.probability(3), 0.25);
        assert_eq!(prior.probability(5), 0.0);
        let s: f64 = prior.support().map(|k| prior.probability(k)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_prior_and_sampling_frequencies() {
        let p = LengthPrior::from_counts(BTreeMap::from([(4, 1)])).unwrap();
        assert_eq!(p.probability(4), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| p.sample(&mut rng) == 4));

        let p = LengthPrior::from_counts(BTreeMap::from([(2, 3), (3, 1), (6, 4)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws: Vec<usize> = (0..10_000).map(|_| p.sample(&mut rng)).collect();
        for k in [2, 3, 6] {
            let f = draws.iter().filter(|&&d| d == k).count() as f64 / 10_000.0;
            assert!((f - p.probability(k)).abs() < 0.02, "k={k}: {f}");
        }
        assert!(LengthPrior::from_counts(BTreeMap::new()).is_err());
    }

    #[test]
    fn seeded_counts_cover_the_prior_evenly() {
        let counts = BTreeMap::from([(3, 316), (4, 372), (5, 334), (6, 360), (7, 323), (8, 295)]);
        let p = LengthPrior::from_counts(counts).unwrap();
        for start in [0u64, 1_000, u64::MAX - 2_000] {
            let draws: Vec<usize> = (0..1_000).map(|i| p.sample_for_seed(start.wrapping_add(i))).collect();
            assert!(draws.iter().all(|k| p.probability(*k) > 0.0));
            let tv = p.total_variation(&draws);
            assert!(tv < 0.01, "start {start}: tv {tv}");
        }
        let one = LengthPrior::from_counts(BTreeMap::from([(5, 9)])).unwrap();
        assert!((0..50).all(|s| one.sample_for_seed(s) == 5));
    }
}
