//! Change-mask scoring: confusion counts, F1, mIoU and per-group aggregation.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("evaluation region is empty")]
    EmptyRegion,
    #[error("nothing to aggregate")]
    NoReports,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// Neither prediction nor ground truth flags anything.
    fn trivially_correct(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        if self.trivially_correct() {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn iou_change(&self) -> f64 {
        if self.trivially_correct() {
            return 1.0;
        }
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_no_change(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn miou(&self) -> f64 {
        0.5 * (self.iou_change() + self.iou_no_change())
    }
}

/// Clears ground-truth labels outside the visual overlap.
pub fn mask_gt_outside_overlap(
    gt: &Array2<bool>,
    overlap: &Array2<bool>,
) -> Result<Array2<bool>, MetricsError> {
    if gt.dim() != overlap.dim() {
        return Err(MetricsError::ShapeMismatch(gt.dim(), overlap.dim()));
    }
    Ok(ndarray::Zip::from(gt)
        .and(overlap)
        .map_collect(|&g, &o| g && o))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub confusion: Confusion,
    pub f1: f64,
    pub miou: f64,
}

impl From<Confusion> for PairScore {
    fn from(confusion: Confusion) -> Self {
        Self {
            confusion,
            f1: confusion.f1(),
            miou: confusion.miou(),
        }
    }
}

/// Scores `pred` against `gt`, counting only pixels inside `region`.
pub fn score(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    region: &Array2<bool>,
) -> Result<PairScore, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    if region.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(region.dim(), gt.dim()));
    }
    let mut c = Confusion::default();
    ndarray::Zip::from(pred)
        .and(gt)
        .and(region)
        .for_each(|&p, &g, &r| {
            if !r {
                return;
            }
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        });
    if c.total() == 0 {
        return Err(MetricsError::EmptyRegion);
    }
    Ok(c.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    /// Grouping key value, e.g. the viewpoint stride.
    pub group: String,
    #[serde(flatten)]
    pub score: PairScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pairs: usize,
    /// Pooled confusion counts.
    pub confusion: Confusion,
    pub micro_f1: f64,
    pub micro_miou: f64,
    /// Mean of per-pair scores.
    pub macro_f1: f64,
    pub macro_miou: f64,
}

impl Aggregate {
    fn of<'a>(reports: impl IntoIterator<Item = &'a PairReport>) -> Option<Self> {
        let (mut pooled, mut n, mut f1_sum, mut miou_sum) = (Confusion::default(), 0usize, 0.0, 0.0);
        for r in reports {
            pooled = pooled.merge(&r.score.confusion);
            f1_sum += r.score.f1;
            miou_sum += r.score.miou;
            n += 1;
        }
        (n > 0).then(|| Self {
            pairs: n,
            confusion: pooled,
            micro_f1: pooled.f1(),
            micro_miou: pooled.miou(),
            macro_f1: f1_sum / n as f64,
            macro_miou: miou_sum / n as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_pair: Vec<PairReport>,
    pub aggregate: Aggregate,
    pub group_key: Option<String>,
    pub groups: BTreeMap<String, Aggregate>,
}

pub fn aggregate(
    reports: Vec<PairReport>,
    group_key: Option<String>,
) -> Result<EvalReport, MetricsError> {
    let overall = Aggregate::of(&reports).ok_or(MetricsError::NoReports)?;
    let mut buckets: BTreeMap<String, Vec<&PairReport>> = BTreeMap::new();
    for r in &reports {
        buckets.entry(r.group.clone()).or_default().push(r);
    }
    let groups = buckets
        .into_iter()
        .filter_map(|(k, v)| Aggregate::of(v).map(|a| (k, a)))
        .collect();
    Ok(EvalReport {
        per_pair: reports,
        aggregate: overall,
        group_key,
        groups,
    })
}

impl EvalReport {
    /// Fixed-width plain-text table, one row per group plus the total.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let key = self.group_key.as_deref().unwrap_or("group");
        out.push_str(&format!(
            "{:<12} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
            key, "pairs", "micro_f1", "micro_iou", "macro_f1", "macro_iou"
        ));
        let row = |name: &str, a: &Aggregate| {
            format!(
                "{:<12} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                name, a.pairs, a.micro_f1, a.micro_miou, a.macro_f1, a.macro_miou
            )
        };
        if self.group_key.is_some() {
            for (name, a) in &self.groups {
                out.push_str(&row(name, a));
            }
        }
        out.push_str(&row("all", &self.aggregate));
        out
    }
}
