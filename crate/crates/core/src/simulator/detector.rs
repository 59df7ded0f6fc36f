//! Parametric detector whose error rates shrink as labeled coverage grows.
//!
//! Skill is stratum-local: labeling frames of a stratum improves the detector
//! only there, so acquisition methods that find under-covered strata through
//! their errors genuinely raise the model's quality. Within a video, labeled
//! frames closer than one coverage block are near-duplicate training samples
//! and count once — which is what makes spreading labels out worth anything.
//! A frame on which the detector made an error is a full training sample;
//! a frame it already handles correctly teaches only `clean_frame_value` —
//! which is what makes finding errors worth anything.
//!
//! Errors flicker: miss and false-positive events are temporally isolated
//! with probability `isolated_prob`, otherwise they persist geometrically.
//! Runs are always flanked by detected frames (that is what "isolated"
//! means), and event starts are rate-adjusted so the per-frame miss
//! probability matches `p_miss` exactly while p_miss ≤ E[len]/(1+E[len]);
//! beyond that it saturates, with the degenerate p_miss = 1 handled exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{substream, World, TAG_DETECT};
use crate::dataset::{quantize6, Detection};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Half-saturation constant: skill = n / (n + kappa).
    pub kappa: f64,
    /// Per-frame miss probability at skill 0 and 1.
    pub p_miss: (f64, f64),
    /// Expected false positives per frame at skill 0 and 1.
    pub fp_rate: (f64, f64),
    /// Box noise (center and size, pixels) at skill 0 and 1.
    pub jitter: (f64, f64),
    /// Mean confidence of true detections at skill 0 and 1.
    pub tp_confidence: (f64, f64),
    /// Mean confidence of false positives at skill 0 and 1.
    pub fp_confidence: (f64, f64),
    pub confidence_noise: f64,
    /// Probability that an error event lasts exactly one frame.
    pub isolated_prob: f64,
    /// Continuation probability of a persistent event, per frame.
    pub persist_continue: f64,
    /// Labeled frames within one block of `coverage_block` frames count once.
    pub coverage_block: usize,
    /// Training value of a labeled frame the detector already got right,
    /// relative to a frame at full value.
    pub clean_frame_value: f64,
    /// Detector errors in a labeled frame at which its training value
    /// saturates at 1; fewer errors interpolate up from `clean_frame_value`.
    pub full_value_errors: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kappa: 50.0,
            p_miss: (0.5, 0.05),
            fp_rate: (0.5, 0.02),
            jitter: (4.0, 1.0),
            tp_confidence: (0.6, 0.95),
            fp_confidence: (0.62, 0.52),
            confidence_noise: 0.08,
            isolated_prob: 0.7,
            persist_continue: 0.75,
            coverage_block: 4,
            clean_frame_value: 0.25,
            full_value_errors: 6.0,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::validation("kappa must be positive"));
        }
        unit("p_miss", self.p_miss.0)?;
        unit("p_miss", self.p_miss.1)?;
        unit("isolated_prob", self.isolated_prob)?;
        unit("persist_continue", self.persist_continue)?;
        if self.persist_continue >= 1.0 {
            return Err(Error::validation("persist_continue must be below 1"));
        }
        for (name, pair) in [
            ("fp_rate", self.fp_rate),
            ("jitter", self.jitter),
            ("tp_confidence", self.tp_confidence),
            ("fp_confidence", self.fp_confidence),
        ] {
            if !(pair.0.is_finite() && pair.1.is_finite() && pair.0 >= 0.0 && pair.1 >= 0.0) {
                return Err(Error::validation(format!("{name} must be non-negative")));
            }
        }
        unit("tp_confidence", self.tp_confidence.0)?;
        unit("tp_confidence", self.tp_confidence.1)?;
        unit("fp_confidence", self.fp_confidence.0)?;
        unit("fp_confidence", self.fp_confidence.1)?;
        if !(self.confidence_noise.is_finite() && self.confidence_noise >= 0.0) {
            return Err(Error::validation("confidence_noise must be non-negative"));
        }
        if self.coverage_block == 0 {
            return Err(Error::validation("coverage_block must be positive"));
        }
        if !(self.clean_frame_value.is_finite()
            && self.clean_frame_value > 0.0
            && self.clean_frame_value <= 1.0)
        {
            return Err(Error::validation("clean_frame_value must lie in (0, 1]"));
        }
        if !(self.full_value_errors.is_finite() && self.full_value_errors >= 1.0) {
            return Err(Error::validation("full_value_errors must be at least 1"));
        }
        Ok(())
    }
}

fn lerp(pair: (f64, f64), s: f64) -> f64 {
    pair.0 + (pair.1 - pair.0) * s
}

/// One injected detector error, for checking estimates against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedError {
    pub frame: usize,
    /// The emitted detection box for false positives, the ground-truth box
    /// for misses.
    pub bbox: BBox,
    pub class_id: usize,
    /// True when the whole event lasted exactly one frame.
    pub isolated: bool,
}

/// Everything the detector injected into one video, one entry per frame an
/// error was present.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionLog {
    pub false_positives: Vec<InjectedError>,
    pub misses: Vec<InjectedError>,
}

impl InjectionLog {
    /// Injected errors of either kind per frame.
    pub fn error_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in self.false_positives.iter().chain(&self.misses) {
            *counts.entry(e.frame).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput {
    /// detections[video][frame] — parallel to the world's videos.
    pub detections: Vec<Vec<Vec<Detection>>>,
    pub logs: Vec<InjectionLog>,
}

#[derive(Debug, Clone)]
pub struct SurrogateDetector {
    pub config: DetectorConfig,
    skills: Vec<f64>,
    /// Effective labeled mass per stratum: error frames count 1, clean
    /// frames `clean_frame_value`, near-duplicates (same coverage block) 0.
    effective: Vec<f64>,
    credited_blocks: BTreeMap<String, std::collections::BTreeSet<usize>>,
}

impl SurrogateDetector {
    pub fn new(config: DetectorConfig, num_strata: usize) -> Self {
        SurrogateDetector {
            config,
            skills: vec![0.0; num_strata],
            effective: vec![0.0; num_strata],
            credited_blocks: BTreeMap::new(),
        }
    }

    /// Detector with pinned per-stratum skills, for tests and harnesses.
    pub fn with_skills(config: DetectorConfig, skills: Vec<f64>) -> Self {
        let effective = vec![0.0; skills.len()];
        SurrogateDetector { config, skills, effective, credited_blocks: BTreeMap::new() }
    }

    pub fn skills(&self) -> &[f64] {
        &self.skills
    }

    /// Account one newly labeled frame given how many errors the detector
    /// made on it. A frame only counts when its coverage block is new for
    /// its video; its value rises from `clean_frame_value` at zero errors to
    /// 1 at `full_value_errors`. Cumulative, so skill never decreases.
    pub fn credit_frame(&mut self, world: &World, video: &str, frame: usize, errors: usize) {
        let gamma = self.config.clean_frame_value;
        let ratio = (errors as f64 / self.config.full_value_errors).min(1.0);
        self.credit_weighted(world, video, frame, gamma + (1.0 - gamma) * ratio);
    }

    /// Account one frame of the initial sample: it trains the first model
    /// from nothing, so it counts in full.
    pub fn credit_init(&mut self, world: &World, video: &str, frame: usize) {
        self.credit_weighted(world, video, frame, 1.0);
    }

    fn credit_weighted(&mut self, world: &World, video: &str, frame: usize, weight: f64) {
        let Some(vi) = world.dataset.video_index(video) else {
            return;
        };
        let block = frame / self.config.coverage_block;
        if !self.credited_blocks.entry(video.to_string()).or_default().insert(block) {
            return;
        }
        let stratum = world.strata[vi];
        self.effective[stratum] += weight;
        let n = self.effective[stratum];
        self.skills[stratum] = n / (n + self.config.kappa);
    }

    /// Detect on every video. `eval_pass` names an independent rng stream so
    /// the scoring pass and the evaluation pass of one cycle never share
    /// draws.
    pub fn detect(&self, world: &World, seed: u64, cycle: usize, eval_pass: bool) -> DetectOutput {
        let mut detections = Vec::with_capacity(world.dataset.videos.len());
        let mut logs = Vec::with_capacity(world.dataset.videos.len());
        for vi in 0..world.dataset.videos.len() {
            let (dets, log) = self.detect_one(world, vi, seed, cycle, eval_pass);
            detections.push(dets);
            logs.push(log);
        }
        DetectOutput { detections, logs }
    }

    /// Detect on a single video. Each video owns an rng substream, so
    /// detecting a subset reproduces exactly what a full pass would emit.
    pub fn detect_one(
        &self,
        world: &World,
        video: usize,
        seed: u64,
        cycle: usize,
        eval_pass: bool,
    ) -> (Vec<Vec<Detection>>, InjectionLog) {
        let mut rng =
            substream(seed, &[TAG_DETECT, u64::from(eval_pass), cycle as u64, video as u64]);
        self.detect_video(world, video, &mut rng)
    }

    pub fn detect_video(
        &self,
        world: &World,
        video: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Vec<Detection>>, InjectionLog) {
        let cfg = &self.config;
        let meta = &world.dataset.manifest.videos[video];
        let gt = &world.dataset.videos[video].ground_truth;
        let num_frames = meta.num_frames;
        let num_classes = world.dataset.manifest.num_classes();
        let s = self.skills[world.strata[video]];

        let p_miss = lerp(cfg.p_miss, s).clamp(0.0, 1.0);
        let lambda = lerp(cfg.fp_rate, s).max(0.0);
        let sigma = lerp(cfg.jitter, s).max(0.0);
        let tp_conf = lerp(cfg.tp_confidence, s);
        let fp_conf = lerp(cfg.fp_confidence, s);
        // Mean event length under the isolated/persistent mixture.
        let e_len = cfg.isolated_prob + (1.0 - cfg.isolated_prob) / (1.0 - cfg.persist_continue);
        // Start probability per detected frame making the stationary
        // per-frame miss rate equal p_miss (clamped at always-starting).
        let start = if p_miss <= 0.0 {
            0.0
        } else if p_miss >= 1.0 {
            f64::INFINITY
        } else {
            (p_miss / (e_len * (1.0 - p_miss))).min(1.0)
        };

        // Tracks in id order: (class, first frame, boxes per alive frame).
        let mut tracks: BTreeMap<u32, (usize, usize, Vec<BBox>)> = BTreeMap::new();
        for (f, objects) in gt.iter().enumerate() {
            for obj in objects {
                tracks
                    .entry(obj.track_id)
                    .or_insert((obj.class_id, f, Vec::new()))
                    .2
                    .push(obj.bbox);
            }
        }

        // Miss masks, drawn per track over its lifetime. A detected frame may
        // start an event covering the following frames; the frame after a
        // run is detected by construction, so runs are flanked on both sides.
        let mut missed: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        for (&tid, (_, _, boxes)) in &tracks {
            let life = boxes.len();
            let mut mask = vec![p_miss >= 1.0; life];
            if p_miss < 1.0 && start > 0.0 {
                let mut f = 0;
                while f < life {
                    if !mask[f] && f + 1 < life && rng.gen_bool(start.min(1.0)) {
                        let len = if rng.gen_bool(cfg.isolated_prob) {
                            1
                        } else {
                            1 + geometric(cfg.persist_continue, rng)
                        };
                        let end = (f + 1 + len).min(life);
                        mask[f + 1..end].fill(true);
                        f = end; // the frame after the run stays detected
                    } else {
                        f += 1;
                    }
                }
            }
            missed.insert(tid, mask);
        }

        let w_img = f64::from(meta.width);
        let h_img = f64::from(meta.height);
        let mut log = InjectionLog::default();

        // Log misses with the actual run length deciding isolation.
        for (&tid, mask) in &missed {
            let (class_id, birth, boxes) = &tracks[&tid];
            let mut f = 0;
            while f < mask.len() {
                if !mask[f] {
                    f += 1;
                    continue;
                }
                let run_start = f;
                while f < mask.len() && mask[f] {
                    f += 1;
                }
                let isolated = f - run_start == 1;
                for m in run_start..f {
                    log.misses.push(InjectedError {
                        frame: birth + m,
                        bbox: boxes[m],
                        class_id: *class_id,
                        isolated,
                    });
                }
            }
        }

        struct FpEvent {
            bbox: BBox,
            class_id: usize,
            left: usize,
            isolated: bool,
        }
        // New-event rate keeps the marginal per-frame false-positive count at
        // lambda despite persistence.
        let event_rate = lambda / e_len;
        let poisson = (event_rate > 0.0).then(|| Poisson::new(event_rate).unwrap());
        let mut active: Vec<FpEvent> = Vec::new();

        let mut frames: Vec<Vec<Detection>> = Vec::with_capacity(num_frames);
        for f in 0..num_frames {
            let mut dets = Vec::new();
            for (&tid, (class_id, birth, boxes)) in &tracks {
                if f < *birth || f >= birth + boxes.len() || missed[&tid][f - birth] {
                    continue;
                }
                let bbox = jittered(&boxes[f - birth], sigma, w_img, h_img, rng);
                let scores = self.score_vector(*class_id, tp_conf, num_classes, rng);
                dets.push(Detection::new(bbox, scores, num_classes).expect("surrogate scores"));
            }

            // Existing false-positive events fire first, then new ones spawn.
            active.retain_mut(|event| {
                let bbox = jittered(&event.bbox, sigma, w_img, h_img, rng);
                let scores = self.score_vector(event.class_id, fp_conf, num_classes, rng);
                log.false_positives.push(InjectedError {
                    frame: f,
                    bbox,
                    class_id: event.class_id,
                    isolated: event.isolated,
                });
                dets.push(Detection::new(bbox, scores, num_classes).expect("surrogate scores"));
                event.left -= 1;
                event.left > 0
            });
            if let Some(poisson) = &poisson {
                let count = poisson.sample(rng).min(100.0) as usize;
                for _ in 0..count {
                    let w = rng.gen_range(cfg_size(world).0..=cfg_size(world).1);
                    let h = rng.gen_range(cfg_size(world).0..=cfg_size(world).1);
                    let x = quantize6(rng.gen_range(0.0..=w_img - w));
                    let y = quantize6(rng.gen_range(0.0..=h_img - h));
                    let base = BBox::new(x, y, quantize6(x + w), quantize6(y + h))
                        .expect("spurious box is valid");
                    let class_id = rng.gen_range(0..num_classes);
                    let len = if rng.gen_bool(cfg.isolated_prob) {
                        1
                    } else {
                        1 + geometric(cfg.persist_continue, rng)
                    };
                    let len = len.min(num_frames - f);
                    let isolated = len == 1;
                    let bbox = jittered(&base, sigma, w_img, h_img, rng);
                    let scores = self.score_vector(class_id, fp_conf, num_classes, rng);
                    log.false_positives.push(InjectedError { frame: f, bbox, class_id, isolated });
                    dets.push(Detection::new(bbox, scores, num_classes).expect("surrogate scores"));
                    if len > 1 {
                        active.push(FpEvent { bbox: base, class_id, left: len - 1, isolated });
                    }
                }
            }
            frames.push(dets);
        }
        (frames, log)
    }

    /// Probability vector over classes + background: `conf` at `class_id`
    /// (plus noise, clamped above the working score threshold), the rest
    /// split between background and a little foreground confusion. Stored as
    /// exact millionths so serialization is lossless.
    fn score_vector(
        &self,
        class_id: usize,
        conf_mean: f64,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let noise = Normal::new(0.0, self.config.confidence_noise).unwrap();
        let conf = (conf_mean + noise.sample(rng)).clamp(0.501, 0.999);
        let mut raw = vec![0.0; num_classes + 1];
        raw[class_id] = conf;
        let rest = 1.0 - conf;
        let fg_share = if num_classes > 1 { 0.3 * rest } else { 0.0 };
        if num_classes > 1 {
            let draws: Vec<f64> = (0..num_classes - 1).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = draws.iter().sum();
            let mut d = 0;
            for c in 0..num_classes {
                if c == class_id {
                    continue;
                }
                raw[c] = if total > 0.0 {
                    fg_share * draws[d] / total
                } else {
                    fg_share / (num_classes - 1) as f64
                };
                d += 1;
            }
        }
        raw[num_classes] = rest - fg_share;
        millionths(&raw)
    }
}

fn cfg_size(world: &World) -> (f64, f64) {
    world.config.size_range
}

fn geometric(continue_prob: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut n = 0;
    while n < 1000 && rng.gen::<f64>() < continue_prob {
        n += 1;
    }
    n
}

fn jittered(b: &BBox, sigma: f64, w_img: f64, h_img: f64, rng: &mut ChaCha8Rng) -> BBox {
    let normal = Normal::new(0.0, sigma).unwrap();
    let (cx, cy) = b.center();
    let cx = (cx + normal.sample(rng)).clamp(1.0, w_img - 1.0);
    let cy = (cy + normal.sample(rng)).clamp(1.0, h_img - 1.0);
    let w = (b.width() + normal.sample(rng)).max(2.0);
    let h = (b.height() + normal.sample(rng)).max(2.0);
    let x_min = quantize6(cx - w / 2.0).max(0.0);
    let y_min = quantize6(cy - h / 2.0).max(0.0);
    let x_max = quantize6(cx + w / 2.0).min(w_img);
    let y_max = quantize6(cy + h / 2.0).min(h_img);
    BBox::new(x_min, y_min, x_max, y_max).expect("jittered box is valid")
}

/// Round a non-negative vector summing to ~1 onto exact millionths that sum
/// to exactly 1_000_000, by largest remainder (ties to the lower index).
fn millionths(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut units: Vec<i64> = Vec::with_capacity(raw.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(raw.len());
    let mut assigned: i64 = 0;
    for (i, &p) in raw.iter().enumerate() {
        let exact = p / total * 1e6;
        let floor = exact.floor();
        units.push(floor as i64);
        assigned += floor as i64;
        remainders.push((exact - floor, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut deficit = 1_000_000 - assigned;
    for &(_, i) in &remainders {
        if deficit == 0 {
            break;
        }
        // A surplus can only appear through float rounding; shave it off the
        // smallest remainders instead.
        if deficit > 0 {
            units[i] += 1;
            deficit -= 1;
        }
    }
    let mut k = remainders.len();
    while deficit < 0 && k > 0 {
        k -= 1;
        let i = remainders[k].1;
        if units[i] > 0 {
            units[i] -= 1;
            deficit += 1;
        }
    }
    units.into_iter().map(|m| m as f64 / 1e6).collect()
}
