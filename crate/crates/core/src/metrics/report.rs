use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{alignment, docsim, frechet_distance, overlap, perceptual_iou, FidExtractor};
use crate::error::{Error, Result};
use crate::layout::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Iou,
    Overlap,
    Alignment,
    Docsim,
    Fid,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Iou,
        MetricKind::Overlap,
        MetricKind::Alignment,
        MetricKind::Docsim,
        MetricKind::Fid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Iou => "iou",
            MetricKind::Overlap => "overlap",
            MetricKind::Alignment => "alignment",
            MetricKind::Docsim => "docsim",
            MetricKind::Fid => "fid",
        }
    }

    /// Parses a comma-separated list such as `iou,overlap,fid`.
    pub fn parse_list(s: &str) -> Result<Vec<MetricKind>> {
        let mut out: Vec<MetricKind> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::InvalidInput("no metrics selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(MetricSummary {
            mean: mean.clamp(min, max),
            std,
            n,
            min,
            max,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub summary: BTreeMap<MetricKind, MetricSummary>,
    /// Per-layout values of the per-layout metrics, in input order.
    pub per_layout: BTreeMap<MetricKind, Vec<f64>>,
}

impl MetricReport {
    pub fn mean(&self, kind: MetricKind) -> Option<f64> {
        self.summary.get(&kind).map(|s| s.mean)
    }

    pub fn to_csv(&self) -> String {
        let kinds: Vec<MetricKind> = self.per_layout.keys().copied().collect();
        let mut out = String::from("index");
        for k in &kinds {
            out.push(',');
            out.push_str(k.name());
        }
        out.push('\n');
        let rows = self.per_layout.values().map(Vec::len).max().unwrap_or(0);
        for i in 0..rows {
            out.push_str(&i.to_string());
            for k in &kinds {
                out.push(',');
                if let Some(v) = self.per_layout[k].get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates `layouts` on the selected metrics. DocSim pairs `layouts[i]`
/// with `references[i]`; FID compares against all references and needs an
/// extractor.
pub fn evaluate(
    layouts: &[Layout],
    references: Option<&[Layout]>,
    metrics: &[MetricKind],
    extractor: Option<&FidExtractor>,
) -> Result<MetricReport> {
    if layouts.is_empty() {
        return Err(Error::InvalidInput("no layouts to evaluate".into()));
    }
    if let Some(bad) = layouts.iter().position(|l| l.elements.is_empty()) {
        return Err(Error::InvalidInput(format!("layout {bad} has no elements")));
    }
    let mut report = MetricReport::default();
    for &kind in metrics {
        let values: Vec<f64> = match kind {
            MetricKind::Iou => layouts.iter().map(perceptual_iou).collect(),
            MetricKind::Overlap => layouts.iter().map(overlap).collect(),
            MetricKind::Alignment => layouts.iter().map(alignment).collect(),
            MetricKind::Docsim => {
                let refs = references.ok_or_else(|| Error::InvalidInput("docsim needs reference layouts".into()))?;
                if refs.len() != layouts.len() {
                    return Err(Error::InvalidInput(format!(
                        "docsim pairs layouts with references one to one ({} vs {})",
                        layouts.len(),
                        refs.len()
                    )));
                }
                layouts.iter().zip(refs).map(|(g, r)| docsim(g, r)).collect()
            }
            MetricKind::Fid => {
                let refs = references.ok_or_else(|| Error::InvalidInput("fid needs reference layouts".into()))?;
                let ex = extractor.ok_or_else(|| Error::InvalidInput("fid needs a trained feature extractor".into()))?;
                let d = frechet_distance(&ex.features(layouts)?, &ex.features(refs)?)?;
                report.summary.insert(
                    kind,
                    MetricSummary {
                        mean: d,
                        std: 0.0,
                        n: layouts.len(),
                        min: d,
                        max: d,
                    },
                );
                continue;
            }
        };
        report
            .summary
            .insert(kind, MetricSummary::from_values(&values).expect("non-empty"));
        report.per_layout.insert(kind, values);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Element;

    #[test]
    fn summary_statistics() {
        let s = MetricSummary::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.min, s.max, s.n), (1.0, 4.0, 4));
        assert_eq!(MetricSummary::from_values(&[7.0]).unwrap().std, 0.0);
    }

    #[test]
    fn parse_metric_lists() {
        assert_eq!(
            MetricKind::parse_list("overlap, iou,iou").unwrap(),
            vec![MetricKind::Iou, MetricKind::Overlap]
        );
        assert!(MetricKind::parse_list("iou,blur").is_err());
        assert!(MetricKind::parse_list("").is_err());
    }

    #[test]
    fn report_json_and_csv() {
        let l = Layout::new(vec![Element::new(0, 0.5, 0.5, 0.2, 0.2), Element::new(1, 0.5, 0.5, 0.2, 0.2)]);
        let r = evaluate(&[l.clone(), l.clone()], Some(&[l.clone(), l]), &[MetricKind::Iou, MetricKind::Docsim], None)
            .unwrap();
        assert_eq!(r.mean(MetricKind::Iou), Some(1.0));
        assert_eq!(r.mean(MetricKind::Docsim), Some(1.0));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["summary"]["iou"]["n"], 2);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next(), Some("index,iou,docsim"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn missing_inputs_are_errors() {
        let l = Layout::new(vec![Element::new(0, 0.5, 0.5, 0.2, 0.2)]);
        assert!(evaluate(std::slice::from_ref(&l), None, &[MetricKind::Docsim], None).is_err());
        assert!(evaluate(std::slice::from_ref(&l), Some(std::slice::from_ref(&l)), &[MetricKind::Fid], None).is_err());
        assert!(evaluate(&[], None, &[MetricKind::Iou], None).is_err());
    }
}
