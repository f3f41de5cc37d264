//! AUROC and average precision at image and pixel level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Result, SivtError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Image,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub level: Level,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, level: Level) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(SivtError::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self { scores, labels, level })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Groups of tied scores in descending order as (positives, negatives).
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last: Option<f64> = None;
        for i in order {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().expect("pushed above");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Trapezoidal area under the ROC curve, one vertex per distinct score.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.counts();
    if pos == 0 || neg == 0 {
        return Err(SivtError::UndefinedMetric(
            "AUROC needs both positive and negative samples".into(),
        ));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (gp, gn) in set.descending_groups() {
        // Trapezoid between (fp, tp) and (fp + gn, tp + gp), unnormalized.
        area += gn as f64 * (tp as f64 + gp as f64 / 2.0);
        tp += gp;
        fp += gn;
    }
    debug_assert_eq!((tp, fp), (pos, neg));
    Ok(area / (pos as f64 * neg as f64))
}

/// `Σ (R_k − R_{k−1})·P_k` over descending score thresholds, ties grouped.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.counts();
    if pos == 0 {
        return Err(SivtError::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gp, gn) in set.descending_groups() {
        tp += gp;
        seen += gp + gn;
        if gp > 0 {
            ap += (gp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// One scored test image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub category: String,
    pub score: f64,
    /// Final anomaly map, row-major.
    pub map: Vec<f64>,
    /// Ground-truth mask at map resolution; `None` for defect-free images.
    pub mask: Option<Vec<bool>>,
    pub is_anomalous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub image_ap: f64,
    pub pixel_ap: f64,
}

/// Per-category rows, their mean, and metrics pooled over every image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_category: BTreeMap<String, MetricRow>,
    pub mean: MetricRow,
    pub pooled: MetricRow,
}

fn metric_row(images: &[&ImageResult]) -> Result<MetricRow> {
    let image_set = ScoredSet::new(
        images.iter().map(|r| r.score).collect(),
        images.iter().map(|r| r.is_anomalous).collect(),
        Level::Image,
    )?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in images {
        match &r.mask {
            Some(m) => {
                if m.len() != r.map.len() {
                    return Err(SivtError::Shape(format!(
                        "mask with {} pixels for a map with {}",
                        m.len(),
                        r.map.len()
                    )));
                }
                labels.extend_from_slice(m);
            }
            None => labels.extend(std::iter::repeat_n(false, r.map.len())),
        }
        scores.extend_from_slice(&r.map);
    }
    let pixel_set = ScoredSet::new(scores, labels, Level::Pixel)?;
    Ok(MetricRow {
        image_auroc: auroc(&image_set)?,
        pixel_auroc: auroc(&pixel_set)?,
        image_ap: average_precision(&image_set)?,
        pixel_ap: average_precision(&pixel_set)?,
    })
}

/// Pixel metrics pool all pixels of the images in a row; image metrics use
/// one score per image. The mean row averages the category rows.
pub fn evaluate_run(results: &[ImageResult]) -> Result<EvalResult> {
    let mut by_cat: BTreeMap<String, Vec<&ImageResult>> = BTreeMap::new();
    for r in results {
        by_cat.entry(r.category.clone()).or_default().push(r);
    }
    let mut per_category = BTreeMap::new();
    for (cat, imgs) in &by_cat {
        per_category.insert(cat.clone(), metric_row(imgs)?);
    }
    let n = per_category.len() as f64;
    let sum = |f: fn(&MetricRow) -> f64| per_category.values().map(f).sum::<f64>() / n;
    let mean = MetricRow {
        image_auroc: sum(|r| r.image_auroc),
        pixel_auroc: sum(|r| r.pixel_auroc),
        image_ap: sum(|r| r.image_ap),
        pixel_ap: sum(|r| r.pixel_ap),
    };
    let all: Vec<&ImageResult> = results.iter().collect();
    Ok(EvalResult {
        pooled: metric_row(&all)?,
        per_category,
        mean,
    })
}

impl EvalResult {
    /// Comma-separated table: header, one row per category, then `mean`
    /// and `pooled`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,image_auroc,pixel_auroc,image_ap,pixel_ap\n");
        let rows = self
            .per_category
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain([("mean", &self.mean), ("pooled", &self.pooled)]);
        for (name, r) in rows {
            writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{:.6}",
                r.image_auroc, r.pixel_auroc, r.image_ap, r.pixel_ap
            )
            .expect("writing to a String");
        }
        out
    }
}
