//! Layout quality metrics. All per-layout metrics work in normalized
//! coordinates and are invariant to element order.

mod extractor;
mod frechet;
mod hungarian;
mod report;

pub use extractor::{jitter_positions, train_fid_extractor, FidExtractor, FidTrainConfig};
pub use frechet::frechet_distance;
pub use hungarian::max_weight_matching;
pub use report::{evaluate, MetricKind, MetricReport, MetricSummary};

use crate::layout::{Element, Layout};

pub const DEFAULT_RESOLUTION: usize = 256;

/// Per-cell box coverage counts on an `R x R` grid. A box covers the cells
/// whose centers fall in its half-open extent `[l, r) x [t, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid {
    resolution: usize,
    coverage: Vec<u16>,
}

fn cell_span(lo: f64, hi: f64, r: usize) -> std::ops::Range<usize> {
    let to_cell = |v: f64| ((v * r as f64 - 0.5).ceil().max(0.0) as usize).min(r);
    to_cell(lo)..to_cell(hi)
}

impl RasterGrid {
    pub fn rasterize(layout: &Layout, resolution: usize) -> Self {
        let mut coverage = vec![0u16; resolution * resolution];
        for e in &layout.elements {
            let [l, t, r, b] = e.ltrb();
            let cols = cell_span(l, r, resolution);
            for row in cell_span(t, b, resolution) {
                for c in &mut coverage[row * resolution + cols.start..row * resolution + cols.end] {
                    *c = c.saturating_add(1);
                }
            }
        }
        RasterGrid { resolution, coverage }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn coverage(&self, row: usize, col: usize) -> u16 {
        self.coverage[row * self.resolution + col]
    }

    /// Number of cells covered by at least `k` boxes.
    pub fn cells_at_least(&self, k: u16) -> usize {
        self.coverage.iter().filter(|&&c| c >= k).count()
    }
}

/// Area covered by two or more boxes over the area covered by at least one.
pub fn perceptual_iou_at(layout: &Layout, resolution: usize) -> f64 {
    let grid = RasterGrid::rasterize(layout, resolution);
    let union = grid.cells_at_least(1);
    if union == 0 {
        0.0
    } else {
        grid.cells_at_least(2) as f64 / union as f64
    }
}

pub fn perceptual_iou(layout: &Layout) -> f64 {
    perceptual_iou_at(layout, DEFAULT_RESOLUTION)
}

fn area(e: &Element) -> f64 {
    let [l, t, r, b] = e.ltrb();
    (r - l).max(0.0) * (b - t).max(0.0)
}

fn intersection(a: &Element, b: &Element) -> f64 {
    let [al, at, ar, ab] = a.ltrb();
    let [bl, bt, br, bb] = b.ltrb();
    (ar.min(br) - al.max(bl)).max(0.0) * (ab.min(bb) - at.max(bt)).max(0.0)
}

/// Pairwise intersection area summed over `i < j`, over the total box area.
pub fn overlap(layout: &Layout) -> f64 {
    let total: f64 = layout.elements.iter().map(area).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let els = &layout.elements;
    let mut inter = 0.0;
    for i in 0..els.len() {
        for j in i + 1..els.len() {
            inter += intersection(&els[i], &els[j]);
        }
    }
    inter / total
}

/// Mean over elements of the smallest gap between any of its six guide
/// lines (left, x-center, right, top, y-center, bottom) and the matching
/// line of another element.
pub fn alignment(layout: &Layout) -> f64 {
    let els = &layout.elements;
    if els.len() < 2 {
        return 0.0;
    }
    let lines = |e: &Element| {
        let [l, t, r, b] = e.ltrb();
        [l, e.x, r, t, e.y, b]
    };
    let all: Vec<[f64; 6]> = els.iter().map(lines).collect();
    let all = &all;
    let sum: f64 = (0..all.len())
        .map(|i| {
            (0..all.len())
                .filter(|&j| j != i)
                .flat_map(|j| (0..6).map(move |k| (all[i][k] - all[j][k]).abs()))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / els.len() as f64
}

/// Matching weight between two boxes: zero across categories, otherwise
/// `exp(-4 * center distance) * min(w) * min(h) / max(area_a, area_b)`.
pub fn docsim_weight(a: &Element, b: &Element) -> f64 {
    if a.category != b.category {
        return 0.0;
    }
    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let shape = a.w.min(b.w) * a.h.min(b.h) / (a.w * a.h).max(b.w * b.h).max(1e-12);
    (-4.0 * d).exp() * shape
}

/// Maximum-weight matching value over `max(|generated|, |reference|)`.
pub fn docsim(generated: &Layout, reference: &Layout) -> f64 {
    let (g, r) = (&generated.elements, &reference.elements);
    let n = g.len().max(r.len());
    if n == 0 {
        return 0.0;
    }
    let weights: Vec<Vec<f64>> = g.iter().map(|a| r.iter().map(|b| docsim_weight(a, b)).collect()).collect();
    let (value, _) = max_weight_matching(&weights);
    value / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(category: usize, l: f64, t: f64, r: f64, b: f64) -> Element {
        Element::new(category, (l + r) / 2.0, (t + b) / 2.0, r - l, b - t)
    }

    fn random_layout(rng: &mut ChaCha8Rng, max: usize) -> Layout {
        let k = rng.gen_range(1..=max);
        Layout::new(
            (0..k)
                .map(|_| {
                    let (w, h) = (rng.gen_range(0.02..0.6), rng.gen_range(0.02..0.6));
                    let x = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
                    let y = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
                    Element::new(rng.gen_range(0..3), x, y, w, h)
                })
                .collect(),
        )
    }

    fn transpose(l: &Layout) -> Layout {
        Layout::new(l.elements.iter().map(|e| Element::new(e.category, e.y, e.x, e.h, e.w)).collect())
    }

    #[test]
    fn toy_iou_is_one_thirteenth() {
        let u = 0.125;
        let l = Layout::new(vec![
            boxed(0, 0.0, 0.0, 5.0 * u, u),
            boxed(1, 0.0, 4.0 * u, u, 5.0 * u),
            boxed(1, 0.5 * u, 4.0 * u, 1.5 * u, 5.0 * u),
        ]);
        let r = 256.0;
        assert!((perceptual_iou(&l) - 1.0 / 13.0).abs() <= 2.0 / (r * r));
    }

    #[test]
    fn iou_extremes() {
        let disjoint = Layout::new(vec![boxed(0, 0.0, 0.0, 0.3, 0.3), boxed(0, 0.5, 0.5, 0.9, 0.9)]);
        assert_eq!(perceptual_iou(&disjoint), 0.0);
        let same = Layout::new(vec![boxed(0, 0.1, 0.1, 0.6, 0.4); 2]);
        assert_eq!(perceptual_iou(&same), 1.0);
        let degenerate = Layout::new(vec![Element::new(0, 0.5, 0.5, 0.0, 0.0)]);
        assert_eq!(perceptual_iou(&degenerate), 0.0);
    }

    #[test]
    fn overlap_closed_forms() {
        let disjoint = Layout::new(vec![boxed(0, 0.0, 0.0, 0.3, 0.3), boxed(0, 0.5, 0.5, 0.9, 0.9)]);
        assert_eq!(overlap(&disjoint), 0.0);
        let unit = Layout::new(vec![boxed(0, 0.0, 0.0, 1.0, 1.0); 2]);
        assert_eq!(overlap(&unit), 0.5);
    }

    #[test]
    fn overlap_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let l = random_layout(&mut rng, 5);
            let total: f64 = l.elements.iter().map(area).sum();
            // E[sum_{i<j} 1[p in b_i and b_j]] over uniform p equals the pairwise area sum
            let n = 1_000_000;
            let mut hits = 0usize;
            for _ in 0..n {
                let (px, py): (f64, f64) = (rng.gen(), rng.gen());
                let c = l
                    .elements
                    .iter()
                    .filter(|e| {
                        let [a, t, r, b] = e.ltrb();
                        a <= px && px < r && t <= py && py < b
                    })
                    .count();
                hits += c * c.saturating_sub(1) / 2;
            }
            let mc = hits as f64 / n as f64 / total;
            assert!((mc - overlap(&l)).abs() < 0.01, "{mc} vs {}", overlap(&l));
        }
    }

    #[test]
    fn overlap_matches_raster_estimate_at_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let l = random_layout(&mut rng, 4);
            let total: f64 = l.elements.iter().map(area).sum();
            let r = 512;
            let mut pair_cells = 0usize;
            let grids: Vec<RasterGrid> = l
                .elements
                .iter()
                .map(|e| RasterGrid::rasterize(&Layout::new(vec![e.clone()]), r))
                .collect();
            for i in 0..grids.len() {
                for j in i + 1..grids.len() {
                    pair_cells += (0..r * r)
                        .filter(|&c| grids[i].coverage(c / r, c % r) > 0 && grids[j].coverage(c / r, c % r) > 0)
                        .count();
                }
            }
            let est = pair_cells as f64 / (r * r) as f64 / total;
            assert!((est - overlap(&l)).abs() < 0.01);
        }
    }

    #[test]
    fn alignment_cases() {
        let shared_left = Layout::new(vec![boxed(0, 0.125, 0.125, 0.5, 0.25), boxed(1, 0.125, 0.625, 0.375, 0.875)]);
        assert_eq!(alignment(&shared_left), 0.0);
        assert_eq!(alignment(&Layout::new(vec![boxed(0, 0.1, 0.1, 0.5, 0.2)])), 0.0);
        let a = Layout::new(vec![boxed(0, 0.0, 0.0, 0.2, 0.1), boxed(0, 0.5, 0.53, 0.9, 0.9)]);
        // gaps per line: left 0.5, xc 0.6, right 0.7, top 0.53, yc 0.665, bottom 0.8
        assert!((alignment(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aligned_corpus_beats_jittered_corpus() {
        let corpus = crate::dataset::generate_synthetic(100, 4, &Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut a, mut j) = (0.0, 0.0);
        for l in corpus.records() {
            a += alignment(l);
            let mut m = l.clone();
            for e in &mut m.elements {
                e.x += rng.gen_range(-0.1..0.1);
            }
            j += alignment(&m);
        }
        assert!(a < j);
    }

    #[test]
    fn docsim_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let l = random_layout(&mut rng, 6);
            let self_sim = docsim(&l, &l);
            assert!((self_sim - 1.0).abs() < 1e-12);
            for _ in 0..10 {
                let mut p = l.clone();
                for e in &mut p.elements {
                    e.x += rng.gen_range(-0.05..0.05);
                    e.w *= rng.gen_range(0.8..1.2);
                }
                p.elements.reverse();
                let s = docsim(&l, &p);
                assert!(s <= self_sim + 1e-12);
                assert!((s - docsim(&p, &l)).abs() < 1e-12);
            }
        }
        let a = Layout::new(vec![boxed(0, 0.1, 0.1, 0.5, 0.2)]);
        let b = Layout::new(vec![boxed(1, 0.1, 0.1, 0.5, 0.2), boxed(2, 0.0, 0.0, 0.1, 0.1)]);
        assert_eq!(docsim(&a, &b), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_ignore_order_and_transpose(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_layout(&mut rng, 8);
            let mut shuffled = l.clone();
            rand::seq::SliceRandom::shuffle(shuffled.elements.as_mut_slice(), &mut rng);
            let t = transpose(&l);
            for f in [perceptual_iou as fn(&Layout) -> f64, overlap, alignment] {
                prop_assert!((f(&l) - f(&shuffled)).abs() < 1e-12);
                prop_assert!((f(&l) - f(&t)).abs() < 1e-12);
            }
        }
    }
}
