//! Detection-quality evaluation: dataset-wide per-class average precision
//! and its mean over the classes that appear in the ground truth.
//!
//! Pipeline per frame and class: NMS, then the score threshold. Surviving
//! detections are ranked by score across the whole dataset and greedily
//! matched to unmatched same-frame ground truth of their class at strict
//! IoU above the threshold; duplicates count as false positives.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, GroundTruthObject};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_keep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the precision envelope at every distinct recall value.
    AllPoints,
    /// Mean of the envelope at recalls 0.0, 0.1, .., 1.0.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_threshold: 0.5,
            nms_threshold: 0.5,
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoints,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_threshold", self.nms_threshold),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::validation(format!(
                    "eval.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// One entry per class; `None` when the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub mean_ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Indices of the detections in one frame that survive per-class NMS and the
/// score threshold, ascending.
pub fn filter_frame(dets: &[Detection], score_threshold: f64, nms_threshold: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let classes: std::collections::BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    for class_id in classes {
        let of_class: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class_id == class_id)
            .collect();
        let items: Vec<_> = of_class.iter().map(|&i| (dets[i].bbox, dets[i].score)).collect();
        for k in nms_keep(&items, nms_threshold) {
            let idx = of_class[k];
            if dets[idx].score >= score_threshold {
                kept.push(idx);
            }
        }
    }
    kept.sort_unstable();
    kept
}

fn average_precision(
    tp_flags: &[bool],
    gt_count: usize,
    interpolation: Interpolation,
) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Envelope: best precision at this recall level or beyond.
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interpolation {
        Interpolation::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for i in 0..n {
                if recall[i] > prev {
                    ap += (recall[i] - prev) * envelope[i];
                    prev = recall[i];
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut total = 0.0;
            for level in 0..=10 {
                let r = level as f64 / 10.0;
                let p = (0..n)
                    .find(|&i| recall[i] >= r - 1e-12)
                    .map_or(0.0, |i| envelope[i]);
                total += p;
            }
            total / 11.0
        }
    }
}

/// Evaluate detections against ground truth over any collection of frames
/// (videos are irrelevant beyond contributing frames).
pub fn evaluate(
    frames: &[(&[GroundTruthObject], &[Detection])],
    num_classes: usize,
    config: &EvalConfig,
) -> EvalReport {
    // Survivors per frame, then per-class dataset-wide ranking.
    let surviving: Vec<Vec<usize>> = frames
        .iter()
        .map(|(_, dets)| filter_frame(dets, config.score_threshold, config.nms_threshold))
        .collect();

    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut true_positives = 0;
    let mut false_positives = 0;
    let mut false_negatives = 0;

    for class_id in 0..num_classes {
        let gt_count: usize = frames
            .iter()
            .map(|(gt, _)| gt.iter().filter(|o| o.class_id == class_id).count())
            .sum();

        // (frame, detection index) survivors of this class, ranked by score
        // descending; ties resolve by frame order then detection order so the
        // ranking is reproducible.
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (f, kept) in surviving.iter().enumerate() {
            for &idx in kept {
                if frames[f].1[idx].class_id == class_id {
                    ranked.push((f, idx));
                }
            }
        }
        ranked.sort_by(|&(fa, ia), &(fb, ib)| {
            let sa = frames[fa].1[ia].score;
            let sb = frames[fb].1[ib].score;
            sb.partial_cmp(&sa)
                .unwrap()
                .then(fa.cmp(&fb))
                .then(ia.cmp(&ib))
        });

        let mut matched: Vec<Vec<bool>> = frames
            .iter()
            .map(|(gt, _)| vec![false; gt.len()])
            .collect();
        let mut tp_flags = Vec::with_capacity(ranked.len());
        for &(f, idx) in &ranked {
            let det = &frames[f].1[idx];
            let gt = frames[f].0;
            let mut best: Option<(usize, f64)> = None;
            for (g, obj) in gt.iter().enumerate() {
                if obj.class_id != class_id || matched[f][g] {
                    continue;
                }
                let overlap = iou(&det.bbox, &obj.bbox);
                if overlap > config.iou_threshold
                    && best.is_none_or(|(_, b)| overlap > b)
                {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[f][g] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }

        let tp = tp_flags.iter().filter(|&&t| t).count();
        true_positives += tp;
        false_positives += tp_flags.len() - tp;
        false_negatives += gt_count - tp;
        per_class_ap.push(if gt_count == 0 {
            None
        } else {
            Some(average_precision(&tp_flags, gt_count, config.interpolation))
        });
    }

    let present: Vec<f64> = per_class_ap.iter().filter_map(|ap| *ap).collect();
    let mean_ap = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };

    EvalReport {
        per_class_ap,
        mean_ap,
        true_positives,
        false_positives,
        false_negatives,
    }
}

#[derive(Serialize)]
struct ClassJson<'a> {
    name: &'a str,
    ap: Option<f64>,
}

#[derive(Serialize)]
struct EvalJson<'a> {
    #[serde(rename = "mAP")]
    mean_ap: f64,
    classes: Vec<ClassJson<'a>>,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
}

pub fn write_eval_json(
    report: &EvalReport,
    classes: &[String],
    w: &mut impl Write,
) -> Result<()> {
    let doc = EvalJson {
        mean_ap: report.mean_ap,
        classes: classes
            .iter()
            .zip(&report.per_class_ap)
            .map(|(name, ap)| ClassJson { name, ap: *ap })
            .collect(),
        true_positives: report.true_positives,
        false_positives: report.false_positives,
        false_negatives: report.false_negatives,
    };
    serde_json::to_writer_pretty(&mut *w, &doc).map_err(|e| Error::validation(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// One point of an active-learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub cycle: usize,
    pub labeled_frames: usize,
    pub labeled_fraction: f64,
    pub report: EvalReport,
}

/// Columns: cycle, labeled_frames, labeled_fraction, mAP, then one AP column
/// per class (empty when the class has no ground truth).
pub fn write_curve_csv(
    points: &[CurvePoint],
    classes: &[String],
    w: &mut impl Write,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    let mut header = vec![
        "cycle".to_string(),
        "labeled_frames".to_string(),
        "labeled_fraction".to_string(),
        "mAP".to_string(),
    ];
    header.extend(classes.iter().map(|c| format!("ap_{c}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::validation(e.to_string()))?;
    for p in points {
        let mut row = vec![
            p.cycle.to_string(),
            p.labeled_frames.to_string(),
            format!("{:.6}", p.labeled_fraction),
            format!("{:.6}", p.report.mean_ap),
        ];
        row.extend(p.report.per_class_ap.iter().map(|ap| match ap {
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        }));
        writer
            .write_record(&row)
            .map_err(|e| Error::validation(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
