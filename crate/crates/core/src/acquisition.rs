//! Acquisition scores and batch selection.
//!
//! Frames are scored by the chosen acquisition function (higher = more worth
//! labeling) and a batch is drawn under a representativeness constraint: no
//! pick may fall within `radius` frames of an already labeled frame or of
//! another pick in the same video. Selection spills across videos when a
//! quota cannot be met and relaxes the radius as a last resort, logging both.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, FrameMap, GroundTruthObject};
use crate::energy::FrameErrors;
use crate::error::{Error, Result};
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Temporal-coherence error estimate (the subject of this crate).
    Tc,
    /// True false-positive counts from ground truth.
    OracleFp,
    /// True false-negative counts from ground truth.
    OracleFn,
    LeastConfidence,
    Entropy,
    Margin,
    /// Uniform scores, no representativeness handling.
    Random,
    /// Uniform scores with the radius and per-video quotas applied.
    RandomR,
}

pub const ALL_METHODS: [Method; 8] = [
    Method::Tc,
    Method::OracleFp,
    Method::OracleFn,
    Method::LeastConfidence,
    Method::Entropy,
    Method::Margin,
    Method::Random,
    Method::RandomR,
];

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tc => "tc",
            Method::OracleFp => "oracle_fp",
            Method::OracleFn => "oracle_fn",
            Method::LeastConfidence => "least_confidence",
            Method::Entropy => "entropy",
            Method::Margin => "margin",
            Method::Random => "random",
            Method::RandomR => "random_r",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown method {s:?}; expected one of: {}",
                    ALL_METHODS.map(|m| m.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which estimated error counts feed the temporal-coherence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcVariant {
    #[default]
    Fp,
    Fn,
    FpFn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Per-video quotas proportional to video length.
    #[default]
    Proportional,
    /// One global ranking across videos.
    Global,
}

/// Set of (video, frame) pairs; the labeled set and pick bookkeeping.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameSet {
    map: FrameMap,
}

impl FrameSet {
    pub fn new() -> Self {
        FrameSet::default()
    }

    pub fn from_map(map: FrameMap) -> Self {
        FrameSet { map }
    }

    pub fn as_map(&self) -> &FrameMap {
        &self.map
    }

    pub fn insert(&mut self, video: &str, frame: usize) -> bool {
        self.map.entry(video.to_string()).or_default().insert(frame)
    }

    pub fn contains(&self, video: &str, frame: usize) -> bool {
        self.map.get(video).is_some_and(|set| set.contains(&frame))
    }

    /// True when some member frame of `video` lies within `radius` of `frame`.
    pub fn within_radius(&self, video: &str, frame: usize, radius: usize) -> bool {
        match self.map.get(video) {
            Some(set) => set
                .range(frame.saturating_sub(radius)..=frame + radius)
                .next()
                .is_some(),
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.map.values().map(|set| set.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn videos(&self) -> impl Iterator<Item = (&str, &BTreeSet<usize>)> {
        self.map.iter().map(|(v, set)| (v.as_str(), set))
    }
}

/// Acquisition score of one frame; higher means more worth labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub video: String,
    pub frame: usize,
    pub score: f64,
}

/// Temporal-coherence scores: the estimated error count per frame.
pub fn tc_frame_scores(
    video: &str,
    frames: &[FrameErrors],
    variant: TcVariant,
) -> Vec<FrameScore> {
    frames
        .iter()
        .enumerate()
        .map(|(frame, e)| FrameScore {
            video: video.to_string(),
            frame,
            score: match variant {
                TcVariant::Fp => e.fp_count as f64,
                TcVariant::Fn => e.fn_count as f64,
                TcVariant::FpFn => (e.fp_count + e.fn_count) as f64,
            },
        })
        .collect()
}

/// True error counts of one frame: detections (already filtered) are greedily
/// matched to same-class ground truth by descending score at strict IoU above
/// `iou_threshold`; unmatched detections are FPs, unmatched objects FNs.
pub fn oracle_frame_counts(
    gt: &[GroundTruthObject],
    dets: &[&Detection],
    iou_threshold: f64,
) -> (usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut matched = vec![false; gt.len()];
    let mut fp = 0;
    for i in order {
        let det = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in gt.iter().enumerate() {
            if matched[g] || obj.class_id != det.class_id {
                continue;
            }
            let overlap = iou(&det.bbox, &obj.bbox);
            if overlap > iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, _)) => matched[g] = true,
            None => fp += 1,
        }
    }
    let fn_count = matched.iter().filter(|&&m| !m).count();
    (fp, fn_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    Fp,
    Fn,
}

pub fn oracle_frame_scores(
    video: &str,
    gt_frames: &[&[GroundTruthObject]],
    det_frames: &[Vec<&Detection>],
    kind: OracleKind,
    iou_threshold: f64,
) -> Vec<FrameScore> {
    gt_frames
        .iter()
        .zip(det_frames)
        .enumerate()
        .map(|(frame, (gt, dets))| {
            let (fp, fn_count) = oracle_frame_counts(gt, dets, iou_threshold);
            FrameScore {
                video: video.to_string(),
                frame,
                score: match kind {
                    OracleKind::Fp => fp as f64,
                    OracleKind::Fn => fn_count as f64,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyKind {
    LeastConfidence,
    Entropy,
    Margin,
}

/// Probability of the most likely foreground class (background excluded).
pub fn least_confidence(det: &Detection) -> f64 {
    det.score
}

/// Shannon entropy of the full score vector, background included.
pub fn entropy(det: &Detection) -> f64 {
    det.scores
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Gap between the two largest probabilities, background included.
pub fn margin(det: &Detection) -> f64 {
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    for &p in &det.scores {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    first - second
}

/// Uncertainty scores over filtered per-frame detections, sign-normalized so
/// higher always means more uncertain. Frames without detections provide no
/// evidence and must rank last: they receive one less than the minimum scored
/// value (0 when every frame is empty), keeping all scores finite.
pub fn uncertainty_frame_scores(
    video: &str,
    det_frames: &[Vec<&Detection>],
    kind: UncertaintyKind,
) -> Vec<FrameScore> {
    let raw: Vec<Option<f64>> = det_frames
        .iter()
        .map(|dets| {
            if dets.is_empty() {
                return None;
            }
            let n = dets.len() as f64;
            Some(match kind {
                // Low mean confidence = high uncertainty.
                UncertaintyKind::LeastConfidence => {
                    -dets.iter().map(|d| least_confidence(d)).sum::<f64>() / n
                }
                UncertaintyKind::Entropy => dets.iter().map(|d| entropy(d)).sum::<f64>() / n,
                // Small margins accumulated over detections = high uncertainty.
                UncertaintyKind::Margin => -dets.iter().map(|d| margin(d)).sum::<f64>(),
            })
        })
        .collect();
    let sentinel = raw
        .iter()
        .flatten()
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    let sentinel = if sentinel.is_finite() { sentinel - 1.0 } else { 0.0 };
    raw.into_iter()
        .enumerate()
        .map(|(frame, score)| FrameScore {
            video: video.to_string(),
            frame,
            score: score.unwrap_or(sentinel),
        })
        .collect()
}

/// Uniform scores in [0, 1), drawn per frame in order.
pub fn random_frame_scores(
    video: &str,
    num_frames: usize,
    rng: &mut impl Rng,
) -> Vec<FrameScore> {
    (0..num_frames)
        .map(|frame| FrameScore {
            video: video.to_string(),
            frame,
            score: rng.gen::<f64>(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub batch_size: usize,
    /// Representativeness radius: picks keep more than this many frames away
    /// from labeled frames and from each other, per video.
    pub radius: usize,
    pub allocation: Allocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePick {
    pub video: String,
    pub frame: usize,
    pub score: f64,
    /// 1-based position in the batch ordered by score.
    pub rank: usize,
    /// True when the radius constraint had to be ignored for this pick.
    pub relaxed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpillReason {
    /// A per-video quota could not be met; the pick moved to another video.
    QuotaShortfall,
    /// The radius constraint was dropped to fill the batch.
    RadiusRelaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpillEvent {
    pub video: String,
    pub frame: usize,
    pub reason: SpillReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionBatch {
    /// Picks ordered by rank.
    pub picks: Vec<FramePick>,
    pub spills: Vec<SpillEvent>,
}

struct Entry {
    video: String,
    frame: usize,
    score: f64,
    tiebreak: u64,
}

fn entry_order(a: &Entry, b: &Entry) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.tiebreak.cmp(&b.tiebreak))
        .then(a.video.cmp(&b.video))
        .then(a.frame.cmp(&b.frame))
}

/// Select `batch_size` frames from the scored pool.
///
/// Deterministic given (scores, labeled set, config, rng state): score ties
/// break by random keys drawn once per frame in canonical (video, frame)
/// order. `video_lengths` supplies the frame counts behind proportional
/// quotas and must cover every scored video. Scored frames that are already
/// labeled are ignored; the remaining pool must be at least `batch_size`.
pub fn select_batch(
    scores: &[FrameScore],
    labeled: &FrameSet,
    video_lengths: &BTreeMap<String, usize>,
    config: &SelectionConfig,
    rng: &mut impl Rng,
) -> Result<SelectionBatch> {
    for s in scores {
        if !s.score.is_finite() {
            return Err(Error::validation(format!(
                "non-finite score for {}:{}",
                s.video, s.frame
            )));
        }
        if !video_lengths.contains_key(&s.video) {
            return Err(Error::validation(format!(
                "no video length for scored video {:?}",
                s.video
            )));
        }
    }

    // Canonical order, duplicate check, tie-break keys.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by_key(|&i| (&scores[i].video, scores[i].frame));
    for pair in order.windows(2) {
        let (a, b) = (&scores[pair[0]], &scores[pair[1]]);
        if a.video == b.video && a.frame == b.frame {
            return Err(Error::validation(format!(
                "duplicate score for {}:{}",
                a.video, a.frame
            )));
        }
    }
    let mut entries: Vec<Entry> = order
        .iter()
        .map(|&i| Entry {
            video: scores[i].video.clone(),
            frame: scores[i].frame,
            score: scores[i].score,
            tiebreak: rng.gen::<u64>(),
        })
        .collect();

    entries.retain(|e| !labeled.contains(&e.video, e.frame));
    if entries.len() < config.batch_size {
        return Err(Error::PoolExhausted {
            needed: config.batch_size,
            available: entries.len(),
        });
    }
    entries.sort_by(entry_order);

    let k = config.radius;
    let mut picked = FrameSet::new();
    let mut picks: Vec<(usize, bool)> = Vec::new(); // (entry index, relaxed)
    let mut spills = Vec::new();
    let blocked = |picked: &FrameSet, e: &Entry| {
        labeled.within_radius(&e.video, e.frame, k) || picked.within_radius(&e.video, e.frame, k)
    };

    if config.allocation == Allocation::Proportional {
        // Quotas: floor of the proportional share, then largest remainders
        // (ties by video id) until the batch is covered.
        let videos: Vec<&str> = {
            let mut v: Vec<&str> = entries.iter().map(|e| e.video.as_str()).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let total_len: usize = videos.iter().map(|v| video_lengths[*v]).sum();
        let mut quota: BTreeMap<&str, usize> = BTreeMap::new();
        let mut remainders: Vec<(f64, &str)> = Vec::new();
        let mut assigned = 0;
        for v in &videos {
            let share = config.batch_size as f64 * video_lengths[*v] as f64 / total_len as f64;
            let floor = share.floor() as usize;
            quota.insert(v, floor);
            assigned += floor;
            remainders.push((share - floor as f64, v));
        }
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for (_, v) in remainders.iter().take(config.batch_size.saturating_sub(assigned)) {
            *quota.get_mut(v).unwrap() += 1;
        }

        for video in &videos {
            let mut taken = 0;
            for (i, e) in entries.iter().enumerate() {
                if taken == quota[video] {
                    break;
                }
                if e.video != *video || blocked(&picked, e) {
                    continue;
                }
                picked.insert(&e.video, e.frame);
                picks.push((i, false));
                taken += 1;
            }
        }
    }

    // Global pass: fills everything under Global allocation, tops up quota
    // shortfalls under Proportional.
    let quota_shortfall = config.allocation == Allocation::Proportional;
    for (i, e) in entries.iter().enumerate() {
        if picks.len() == config.batch_size {
            break;
        }
        if picked.contains(&e.video, e.frame) || blocked(&picked, e) {
            continue;
        }
        picked.insert(&e.video, e.frame);
        picks.push((i, false));
        if quota_shortfall {
            spills.push(SpillEvent {
                video: e.video.clone(),
                frame: e.frame,
                reason: SpillReason::QuotaShortfall,
            });
        }
    }

    // Relaxed pass: radius dropped, anything unlabeled goes.
    for (i, e) in entries.iter().enumerate() {
        if picks.len() == config.batch_size {
            break;
        }
        if picked.contains(&e.video, e.frame) {
            continue;
        }
        picked.insert(&e.video, e.frame);
        picks.push((i, true));
        spills.push(SpillEvent {
            video: e.video.clone(),
            frame: e.frame,
            reason: SpillReason::RadiusRelaxed,
        });
    }
    debug_assert_eq!(picks.len(), config.batch_size);

    for spill in &spills {
        log::warn!(
            "selection spill: {}:{} ({:?})",
            spill.video,
            spill.frame,
            spill.reason
        );
    }

    // Rank by the same order entries were considered in.
    picks.sort_by(|&(a, _), &(b, _)| a.cmp(&b));
    let picks = picks
        .into_iter()
        .enumerate()
        .map(|(rank, (i, relaxed))| FramePick {
            video: entries[i].video.clone(),
            frame: entries[i].frame,
            score: entries[i].score,
            rank: rank + 1,
            relaxed,
        })
        .collect();

    Ok(SelectionBatch { picks, spills })
}

/// Columns: method, cycle, video_id, frame, score, rank.
pub fn write_selection_csv(
    rows: &[(&str, usize, &SelectionBatch)],
    w: &mut impl Write,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(["method", "cycle", "video_id", "frame", "score", "rank"])
        .map_err(|e| Error::validation(e.to_string()))?;
    for (method, cycle, batch) in rows {
        for pick in &batch.picks {
            writer
                .write_record([
                    method.to_string(),
                    cycle.to_string(),
                    pick.video.clone(),
                    pick.frame.to_string(),
                    format!("{:.6}", pick.score),
                    pick.rank.to_string(),
                ])
                .map_err(|e| Error::validation(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(scores: Vec<f64>) -> Detection {
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), scores, 2).unwrap()
    }

    #[test]
    fn per_detection_uncertainty_values() {
        let d = det(vec![0.7, 0.2, 0.1]);
        assert_eq!(least_confidence(&d), 0.7);
        let expected = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&d) - expected).abs() < 1e-12);
        assert!((entropy(&d) - 0.801819).abs() < 1e-6);
        assert!((margin(&d) - 0.5).abs() < 1e-12);
        // Background dominating the margin: 0.45 vs 0.45 gives zero margin
        // even though the foreground class is clear.
        let d = det(vec![0.45, 0.1, 0.45]);
        assert!((margin(&d) - 0.0).abs() < 1e-12);
        assert_eq!(least_confidence(&d), 0.45);
    }

    #[test]
    fn empty_frames_rank_last_for_uncertainty() {
        let confident = vec![det(vec![0.98, 0.01, 0.01])];
        let unsure = vec![det(vec![0.5, 0.3, 0.2])];
        for kind in [
            UncertaintyKind::LeastConfidence,
            UncertaintyKind::Entropy,
            UncertaintyKind::Margin,
        ] {
            let frames: Vec<Vec<&Detection>> = vec![
                confident.iter().collect(),
                Vec::new(),
                unsure.iter().collect(),
            ];
            let scores = uncertainty_frame_scores("v", &frames, kind);
            assert!(scores.iter().all(|s| s.score.is_finite()));
            let empty = scores[1].score;
            assert!(empty < scores[0].score, "{kind:?}: empty must rank below confident");
            assert!(empty < scores[2].score, "{kind:?}: empty must rank below unsure");
            assert!(scores[2].score > scores[0].score, "{kind:?}: unsure above confident");
        }
    }

    #[test]
    fn tc_scores_follow_counts() {
        let frames = vec![
            FrameErrors { fp_count: 2, fn_count: 1, ..Default::default() },
            FrameErrors::default(),
        ];
        let fp = tc_frame_scores("v", &frames, TcVariant::Fp);
        assert_eq!((fp[0].score, fp[1].score), (2.0, 0.0));
        let both = tc_frame_scores("v", &frames, TcVariant::FpFn);
        assert_eq!(both[0].score, 3.0);
    }

    #[test]
    fn oracle_counts_duplicates_as_false_positives() {
        let gt = [GroundTruthObject {
            track_id: 0,
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        }];
        let d1 = det(vec![0.9, 0.05, 0.05]);
        let d2 = det(vec![0.8, 0.1, 0.1]);
        let (fp, fn_count) = oracle_frame_counts(&gt, &[&d1, &d2], 0.5);
        assert_eq!((fp, fn_count), (1, 0));
        let (fp, fn_count) = oracle_frame_counts(&gt, &[], 0.5);
        assert_eq!((fp, fn_count), (0, 1));
    }

    fn lengths(v: &[(&str, usize)]) -> BTreeMap<String, usize> {
        v.iter().map(|(id, l)| (id.to_string(), *l)).collect()
    }

    fn score(video: &str, frame: usize, score: f64) -> FrameScore {
        FrameScore { video: video.to_string(), frame, score }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn proportional_quotas_follow_video_length() {
        // Batch 5 over lengths 100/100/50: quotas 2/2/1.
        let mut scores = Vec::new();
        for (v, l) in [("a", 100usize), ("b", 100), ("c", 50)] {
            for f in (0..l).step_by(10) {
                scores.push(score(v, f, (f % 37) as f64));
            }
        }
        let batch = select_batch(
            &scores,
            &FrameSet::new(),
            &lengths(&[("a", 100), ("b", 100), ("c", 50)]),
            &SelectionConfig { batch_size: 5, radius: 1, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap();
        let mut per_video: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &batch.picks {
            *per_video.entry(p.video.as_str()).or_default() += 1;
        }
        assert_eq!(per_video, BTreeMap::from([("a", 2), ("b", 2), ("c", 1)]));
        assert!(batch.spills.is_empty());
    }

    #[test]
    fn largest_remainder_breaks_ties_by_video_id() {
        // Batch 4 over three equal videos: shares 1.33 each; the extra goes
        // to the alphabetically first video.
        let mut scores = Vec::new();
        for v in ["a", "b", "c"] {
            for f in (0..30).step_by(3) {
                scores.push(score(v, f, 1.0));
            }
        }
        let batch = select_batch(
            &scores,
            &FrameSet::new(),
            &lengths(&[("a", 30), ("b", 30), ("c", 30)]),
            &SelectionConfig { batch_size: 4, radius: 1, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap();
        let count = |v: &str| batch.picks.iter().filter(|p| p.video == v).count();
        assert_eq!((count("a"), count("b"), count("c")), (2, 1, 1));
    }

    #[test]
    fn radius_excludes_labeled_neighborhood_and_other_picks() {
        let scores: Vec<FrameScore> =
            (0..20).map(|f| score("a", f, (20 - f) as f64)).collect();
        let mut labeled = FrameSet::new();
        labeled.insert("a", 10);
        let batch = select_batch(
            &scores,
            &labeled,
            &lengths(&[("a", 20)]),
            &SelectionConfig { batch_size: 3, radius: 2, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap();
        // Scores descend with frame, so picks are 0, 3, 6; frames 8..12 are
        // blocked by the label at 10 regardless.
        let frames: Vec<usize> = batch.picks.iter().map(|p| p.frame).collect();
        assert_eq!(frames, vec![0, 3, 6]);
        assert!(batch.picks.iter().all(|p| !p.relaxed));
    }

    #[test]
    fn quota_shortfall_spills_to_other_videos() {
        // Video a has one eligible frame but earns quota 2; the shortfall
        // moves to b with a logged event.
        let scores = vec![
            score("a", 0, 9.0),
            score("b", 0, 5.0),
            score("b", 10, 4.0),
            score("b", 20, 3.0),
        ];
        let batch = select_batch(
            &scores,
            &FrameSet::new(),
            &lengths(&[("a", 100), ("b", 100)]),
            &SelectionConfig { batch_size: 4, radius: 1, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap();
        assert_eq!(batch.picks.len(), 4);
        assert_eq!(batch.spills.len(), 1);
        assert_eq!(batch.spills[0].reason, SpillReason::QuotaShortfall);
        assert_eq!(batch.spills[0].video, "b");
    }

    #[test]
    fn radius_relaxes_only_when_pool_demands_it() {
        // Five frames, frame 2 labeled, radius 2: every unlabeled frame is
        // within the radius, so filling a batch of 2 must relax.
        let scores: Vec<FrameScore> = (0..5).map(|f| score("a", f, f as f64)).collect();
        let mut labeled = FrameSet::new();
        labeled.insert("a", 2);
        let batch = select_batch(
            &scores,
            &labeled,
            &lengths(&[("a", 5)]),
            &SelectionConfig { batch_size: 2, radius: 2, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap();
        assert_eq!(batch.picks.len(), 2);
        assert!(batch.picks.iter().all(|p| p.relaxed));
        assert_eq!(batch.spills.len(), 2);
        assert!(batch
            .spills
            .iter()
            .all(|s| s.reason == SpillReason::RadiusRelaxed));
        // Highest scores first: frames 4 and 3.
        let frames: Vec<usize> = batch.picks.iter().map(|p| p.frame).collect();
        assert_eq!(frames, vec![4, 3]);
    }

    #[test]
    fn pool_exhaustion_is_an_error() {
        let scores = vec![score("a", 0, 1.0), score("a", 1, 2.0)];
        let mut labeled = FrameSet::new();
        labeled.insert("a", 0);
        let err = select_batch(
            &scores,
            &labeled,
            &lengths(&[("a", 2)]),
            &SelectionConfig { batch_size: 2, radius: 0, allocation: Allocation::Proportional },
            &mut rng(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { needed: 2, available: 1 }));
    }

    #[test]
    fn rejects_duplicates_and_non_finite_scores() {
        let scores = vec![score("a", 0, 1.0), score("a", 0, 2.0)];
        assert!(select_batch(
            &scores,
            &FrameSet::new(),
            &lengths(&[("a", 2)]),
            &SelectionConfig { batch_size: 1, radius: 0, allocation: Allocation::Global },
            &mut rng(),
        )
        .is_err());
        let scores = vec![score("a", 0, f64::NAN)];
        assert!(select_batch(
            &scores,
            &FrameSet::new(),
            &lengths(&[("a", 2)]),
            &SelectionConfig { batch_size: 1, radius: 0, allocation: Allocation::Global },
            &mut rng(),
        )
        .is_err());
    }

    #[test]
    fn selection_is_deterministic_for_a_seed() {
        let scores: Vec<FrameScore> = (0..50).map(|f| score("a", f, 1.0)).collect();
        let config = SelectionConfig { batch_size: 5, radius: 1, allocation: Allocation::Global };
        let l = lengths(&[("a", 50)]);
        let a = select_batch(&scores, &FrameSet::new(), &l, &config, &mut rng()).unwrap();
        let b = select_batch(&scores, &FrameSet::new(), &l, &config, &mut rng()).unwrap();
        assert_eq!(a, b);
        let c = select_batch(
            &scores,
            &FrameSet::new(),
            &l,
            &config,
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        // All scores tie, so a different seed almost surely picks different frames.
        assert_ne!(
            a.picks.iter().map(|p| p.frame).collect::<Vec<_>>(),
            c.picks.iter().map(|p| p.frame).collect::<Vec<_>>()
        );
    }

    #[test]
    fn raising_a_selected_score_keeps_it_selected() {
        let mut scores: Vec<FrameScore> = (0..30).map(|f| score("a", f, (f % 7) as f64)).collect();
        let config = SelectionConfig { batch_size: 4, radius: 1, allocation: Allocation::Proportional };
        let l = lengths(&[("a", 30)]);
        let before = select_batch(&scores, &FrameSet::new(), &l, &config, &mut rng()).unwrap();
        let target = before.picks[2].frame;
        scores[target].score += 1.0;
        let after = select_batch(&scores, &FrameSet::new(), &l, &config, &mut rng()).unwrap();
        assert!(after.picks.iter().any(|p| p.frame == target));
    }

    #[test]
    fn selection_csv_shape() {
        let batch = SelectionBatch {
            picks: vec![FramePick {
                video: "a".to_string(),
                frame: 3,
                score: 2.0,
                rank: 1,
                relaxed: false,
            }],
            spills: Vec::new(),
        };
        let mut buf = Vec::new();
        write_selection_csv(&[("tc", 1, &batch)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "method,cycle,video_id,frame,score,rank");
        assert_eq!(lines.next().unwrap(), "tc,1,a,3,2.000000,1");
    }
}
