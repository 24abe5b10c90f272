//! Segmentation and detection metrics, per-characteristic reports and
//! attention concentration summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{components, Mask};
use crate::synthdata::Characteristic;
use crate::vfm::{attention_stats, AttentionStats};

/// Default centroid distance, in pixels, within which a prediction detects
/// a target.
pub const MATCH_DISTANCE: f64 = 3.0;
pub const DECISION_THRESHOLD: f64 = 0.5;
pub const OVERALL: &str = "Overall";

fn check_pairs(preds: &[&Mask], gts: &[&Mask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Pooled IoU `Σ|P∩G| / Σ|P∪G|`; 1 when both sides are empty everywhere.
pub fn iou(preds: &[&Mask], gts: &[&Mask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        inter += p.intersection_count(g);
        union += p.union_count(g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean of per-image IoU (an image with both masks empty scores 1).
pub fn niou(preds: &[&Mask], gts: &[&Mask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    if preds.is_empty() {
        return Err(Error::Domain("nIoU of an empty set".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| iou(&[*p], &[*g]).expect("shapes checked"))
        .sum();
    Ok(total / preds.len() as f64)
}

/// Detection counts of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DetectionCounts {
    pub targets: usize,
    pub detected: usize,
    pub false_pixels: usize,
    pub pixels: usize,
}

/// Greedy one-to-one matching of predicted to true components by centroid
/// distance: pairs within `dist` are taken in order of increasing distance
/// (ties by target, then prediction index). Unmatched predicted components
/// count as false alarms.
pub fn detection_counts(pred: &Mask, gt: &Mask, dist: f64) -> DetectionCounts {
    let pc = components(pred);
    let gc = components(gt);
    let mut pairs = Vec::new();
    for (gi, g) in gc.iter().enumerate() {
        for (pi, p) in pc.iter().enumerate() {
            let d = ((g.centroid.0 - p.centroid.0).powi(2) + (g.centroid.1 - p.centroid.1).powi(2))
                .sqrt();
            if d <= dist {
                pairs.push((d, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut g_used = vec![false; gc.len()];
    let mut p_used = vec![false; pc.len()];
    for (_, gi, pi) in pairs {
        if !g_used[gi] && !p_used[pi] {
            g_used[gi] = true;
            p_used[pi] = true;
        }
    }
    let false_pixels = pc
        .iter()
        .zip(&p_used)
        .filter(|(_, &u)| !u)
        .map(|(c, _)| c.area())
        .sum();
    DetectionCounts {
        targets: gc.len(),
        detected: g_used.iter().filter(|&&u| u).count(),
        false_pixels,
        pixels: pred.len(),
    }
}

/// `(P_d, F_a)` pooled over images: detected fraction of all targets (1
/// with no targets) and false-alarm pixels per image pixel.
pub fn pd_fa(preds: &[&Mask], gts: &[&Mask], dist: f64) -> Result<(f64, f64)> {
    check_pairs(preds, gts)?;
    let mut acc = DetectionCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        let c = detection_counts(p, g, dist);
        acc.targets += c.targets;
        acc.detected += c.detected;
        acc.false_pixels += c.false_pixels;
        acc.pixels += c.pixels;
    }
    let pd = if acc.targets == 0 {
        1.0
    } else {
        acc.detected as f64 / acc.targets as f64
    };
    let fa = if acc.pixels == 0 {
        0.0
    } else {
        acc.false_pixels as f64 / acc.pixels as f64
    };
    Ok((pd, fa))
}

/// Metrics of one evaluation subset, as fractions. `fa` is per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub n: usize,
}

pub fn evaluate(preds: &[&Mask], gts: &[&Mask]) -> Result<Metrics> {
    let (pd, fa) = pd_fa(preds, gts, MATCH_DISTANCE)?;
    Ok(Metrics {
        iou: iou(preds, gts)?,
        niou: niou(preds, gts)?,
        pd,
        fa,
        n: preds.len(),
    })
}

/// Overall row followed by one row per characteristic present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub threshold: f64,
    pub rows: Vec<(String, Metrics)>,
}

impl EvalReport {
    pub fn row(&self, tag: &str) -> Option<&Metrics> {
        self.rows.iter().find(|(t, _)| t == tag).map(|(_, m)| m)
    }

    /// Columns: split, tag, IoU %, nIoU %, P_d %, F_a ×1e-6, n.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,tag,IoU,nIoU,Pd,Fa,n\n");
        for (tag, m) in &self.rows {
            let _ = writeln!(
                s,
                "{},{tag},{:.4},{:.4},{:.4},{:.4},{}",
                self.split,
                m.iou * 100.0,
                m.niou * 100.0,
                m.pd * 100.0,
                m.fa * 1e6,
                m.n
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("split {} (threshold {})\n", self.split, self.threshold);
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>8} {:>10} {:>5}",
            "tag", "IoU", "nIoU", "Pd", "Fa(1e-6)", "n"
        );
        for (tag, m) in &self.rows {
            let _ = writeln!(
                s,
                "{tag:<12} {:>8.2} {:>8.2} {:>8.2} {:>10.2} {:>5}",
                m.iou * 100.0,
                m.niou * 100.0,
                m.pd * 100.0,
                m.fa * 1e6,
                m.n
            );
        }
        s
    }
}

/// Metrics overall and per characteristic for binarised predictions.
pub fn characteristic_report(
    split: &str,
    tags: &[Characteristic],
    preds: &[&Mask],
    gts: &[&Mask],
) -> Result<EvalReport> {
    if tags.len() != preds.len() {
        return Err(Error::Data(format!(
            "{} tags for {} predictions",
            tags.len(),
            preds.len()
        )));
    }
    let mut rows = vec![(OVERALL.to_string(), evaluate(preds, gts)?)];
    for tag in Characteristic::ALL {
        let idx: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == tag).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<&Mask> = idx.iter().map(|&i| preds[i]).collect();
        let g: Vec<&Mask> = idx.iter().map(|&i| gts[i]).collect();
        rows.push((tag.name().to_string(), evaluate(&p, &g)?));
    }
    Ok(EvalReport {
        split: split.to_string(),
        threshold: DECISION_THRESHOLD,
        rows,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Attention statistics of one subset; `h_norm` and `p_max` in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub h_norm: MeanStd,
    pub eff_n: MeanStd,
    pub p_max: MeanStd,
    pub n: usize,
}

fn summarize(stats: &[AttentionStats]) -> AttentionSummary {
    let col =
        |f: &dyn Fn(&AttentionStats) -> f64| MeanStd::of(&stats.iter().map(f).collect::<Vec<_>>());
    AttentionSummary {
        h_norm: col(&|s| 100.0 * s.h_norm),
        eff_n: col(&|s| s.eff_n),
        p_max: col(&|s| 100.0 * s.p_max),
        n: stats.len(),
    }
}

/// Mean and population std of attention statistics overall and per tag.
pub fn attention_report(
    tags: &[Characteristic],
    attention: &[Vec<f64>],
) -> Result<Vec<(String, AttentionSummary)>> {
    if tags.len() != attention.len() {
        return Err(Error::Data(format!(
            "{} tags for {} attention vectors",
            tags.len(),
            attention.len()
        )));
    }
    if tags.is_empty() {
        return Err(Error::Domain("attention report of an empty set".into()));
    }
    let stats: Vec<AttentionStats> = attention
        .iter()
        .map(|a| attention_stats(a))
        .collect::<Result<_>>()?;
    let mut out = vec![(OVERALL.to_string(), summarize(&stats))];
    for tag in Characteristic::ALL {
        let sub: Vec<AttentionStats> = (0..tags.len())
            .filter(|&i| tags[i] == tag)
            .map(|i| stats[i])
            .collect();
        if !sub.is_empty() {
            out.push((tag.name().to_string(), summarize(&sub)));
        }
    }
    Ok(out)
}

pub fn attention_csv(report: &[(String, AttentionSummary)]) -> String {
    let mut s =
        String::from("tag,H_norm_mean,H_norm_std,EffN_mean,EffN_std,p_max_mean,p_max_std,n\n");
    for (tag, a) in report {
        let _ = writeln!(
            s,
            "{tag},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            a.h_norm.mean, a.h_norm.std, a.eff_n.mean, a.eff_n.std, a.p_max.mean, a.p_max.std, a.n
        );
    }
    s
}
