//! Closed-loop harness: label, detect, score, select, repeat.
//!
//! One run fixes a world, a method, and a seed. The initial label set and
//! every detection pass draw from substreams independent of the method, so
//! methods differ only where they should: in which frames they pick. Curve
//! point 0 is therefore identical across methods for one seed.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::detector::DetectorConfig;
use super::{substream, SurrogateDetector, World, TAG_INIT, TAG_SELECT, TAG_SPLIT};
use crate::acquisition::{
    oracle_frame_scores, random_frame_scores, select_batch, tc_frame_scores,
    uncertainty_frame_scores, Allocation, FrameScore, FrameSet, Method, OracleKind,
    SelectionBatch, SelectionConfig, TcVariant, UncertaintyKind,
};
use crate::dataset::{Detection, FrameMap, GroundTruthObject};
use crate::energy::{aggregate_frame_errors, solve, EnergyModel};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, filter_frame, CurvePoint, EvalConfig};
use crate::tcgraph::{build_video_graphs, TCConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub cycles: usize,
    /// Frames labeled per cycle, as a fraction of the train pool.
    pub budget_fraction: f64,
    /// Fraction of the train pool labeled up front, shared by all methods.
    pub init_fraction: f64,
    /// Representativeness radius for every method except plain random.
    pub radius: usize,
    /// Fraction of each stratum's videos held out for evaluation.
    pub test_fraction: f64,
    pub detector: DetectorConfig,
    pub tc: TCConfig,
    pub tc_variant: TcVariant,
    pub eval: EvalConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            cycles: 5,
            budget_fraction: 0.02,
            init_fraction: 0.02,
            radius: 3,
            test_fraction: 0.2,
            detector: DetectorConfig::default(),
            tc: TCConfig::default(),
            tc_variant: TcVariant::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::validation("cycles must be positive"));
        }
        for (name, v) in [
            ("budget_fraction", self.budget_fraction),
            ("init_fraction", self.init_fraction),
        ] {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(Error::validation(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.test_fraction.is_finite()
            && self.test_fraction > 0.0
            && self.test_fraction < 1.0)
        {
            return Err(Error::validation(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.tc.validate()?;
        self.eval.validate()?;
        self.detector.validate()
    }
}

/// What one cycle selected, with the labeled count before it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSelection {
    pub cycle: usize,
    pub labeled_before: usize,
    pub batch: SelectionBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    /// Video indices held out for evaluation, ascending.
    pub test_videos: Vec<usize>,
    /// Frames labeled up front, before any cycle ran.
    pub init_labeled: FrameMap,
    /// `cycles + 1` points; point 0 is the state after initial labeling.
    pub curve: Vec<CurvePoint>,
    pub selections: Vec<CycleSelection>,
}

/// Hold out `test_fraction` of each stratum's videos (at least one, never
/// all) wherever the stratum has two or more; singleton strata stay in the
/// train pool. Returns (train, test), both ascending.
fn split_videos(world: &World, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = substream(seed, &[TAG_SPLIT]);
    let mut test: Vec<usize> = Vec::new();
    for s in 0..world.num_strata() {
        let mut members: Vec<usize> =
            (0..world.strata.len()).filter(|&vi| world.strata[vi] == s).collect();
        if members.len() < 2 {
            continue;
        }
        let n_test = ((test_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        for i in 0..n_test {
            let j = rng.gen_range(i..members.len());
            members.swap(i, j);
        }
        test.extend_from_slice(&members[..n_test]);
    }
    test.sort_unstable();
    let train: Vec<usize> =
        (0..world.strata.len()).filter(|vi| !test.binary_search(vi).is_ok()).collect();
    (train, test)
}

fn filtered_refs<'a>(frames: &'a [Vec<Detection>], eval: &EvalConfig) -> Vec<Vec<&'a Detection>> {
    frames
        .iter()
        .map(|dets| {
            filter_frame(dets, eval.score_threshold, eval.nms_threshold)
                .into_iter()
                .map(|i| &dets[i])
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_point(
    world: &World,
    detector: &SurrogateDetector,
    test: &[usize],
    labeled: &FrameSet,
    total_train: usize,
    cycle: usize,
    seed: u64,
    eval: &EvalConfig,
) -> CurvePoint {
    let per_video: Vec<Vec<Vec<Detection>>> =
        test.iter().map(|&vi| detector.detect_one(world, vi, seed, cycle, true).0).collect();
    let mut frames: Vec<(&[GroundTruthObject], &[Detection])> = Vec::new();
    for (ti, &vi) in test.iter().enumerate() {
        for (f, objects) in world.dataset.videos[vi].ground_truth.iter().enumerate() {
            frames.push((objects.as_slice(), per_video[ti][f].as_slice()));
        }
    }
    let report = evaluate(&frames, world.dataset.manifest.num_classes(), eval);
    CurvePoint {
        cycle,
        labeled_frames: labeled.len(),
        labeled_fraction: labeled.len() as f64 / total_train as f64,
        report,
    }
}

/// Run the full loop for one method and seed. The world carries its own
/// ground truth, so "labeling" a frame is free; what labels buy is detector
/// skill in the frame's stratum.
pub fn run_loop(
    world: &World,
    method: Method,
    config: &LoopConfig,
    seed: u64,
) -> Result<RunResult> {
    config.validate()?;
    let num_classes = world.dataset.manifest.num_classes();
    let metas = &world.dataset.manifest.videos;

    let (train, test) = split_videos(world, config.test_fraction, seed);
    if test.is_empty() {
        return Err(Error::validation(
            "test split is empty; no stratum has two or more videos",
        ));
    }

    let total: usize = train.iter().map(|&vi| metas[vi].num_frames).sum();
    let batch = ((config.budget_fraction * total as f64).round() as usize).max(1);
    let init = ((config.init_fraction * total as f64).round() as usize).max(1);
    let needed = init + config.cycles * batch;
    if needed > total {
        return Err(Error::PoolExhausted { needed, available: total });
    }

    // Initial labels: uniform over the train pool, method-independent. They
    // train the first model from nothing, so each counts as a full sample.
    let mut labeled = FrameSet::new();
    let mut detector = SurrogateDetector::new(config.detector.clone(), world.num_strata());
    {
        let mut rng = substream(seed, &[TAG_INIT]);
        let mut pool: Vec<(usize, usize)> = Vec::with_capacity(total);
        for &vi in &train {
            pool.extend((0..metas[vi].num_frames).map(|f| (vi, f)));
        }
        for i in 0..init {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        for &(vi, f) in &pool[..init] {
            labeled.insert(&metas[vi].id, f);
            detector.credit_init(world, &metas[vi].id, f);
        }
    }
    let init_labeled = labeled.as_map().clone();

    let video_lengths: BTreeMap<String, usize> =
        train.iter().map(|&vi| (metas[vi].id.clone(), metas[vi].num_frames)).collect();
    // Plain random ignores representativeness entirely; every other method
    // keeps the radius and per-video proportional quotas.
    let (radius, allocation) = match method {
        Method::Random => (0, Allocation::Global),
        _ => (config.radius, Allocation::Proportional),
    };
    let selection = SelectionConfig { batch_size: batch, radius, allocation };

    let mut curve = Vec::with_capacity(config.cycles + 1);
    curve.push(eval_point(world, &detector, &test, &labeled, total, 0, seed, &config.eval));

    let mut selections = Vec::with_capacity(config.cycles);
    for cycle in 1..=config.cycles {
        // One pool pass per cycle; its injected-error log also decides how
        // much each frame picked this cycle teaches the detector.
        let pool: Vec<(Vec<Vec<Detection>>, crate::simulator::InjectionLog)> =
            train.iter().map(|&vi| detector.detect_one(world, vi, seed, cycle, false)).collect();

        let mut select_rng = substream(seed, &[TAG_SELECT, cycle as u64]);
        let mut scores: Vec<FrameScore> = Vec::with_capacity(total);
        for (ti, &vi) in train.iter().enumerate() {
            let meta = &metas[vi];
            let detections = &pool[ti].0;
            match method {
                Method::Tc => {
                    let motion = &world.dataset.videos[vi].motion;
                    let graphs =
                        build_video_graphs(meta, detections, motion, num_classes, &config.tc)?;
                    let model = EnergyModel::default();
                    let solutions: Vec<_> = graphs.iter().map(|g| solve(g, &model)).collect();
                    let errors = aggregate_frame_errors(meta.num_frames, &solutions);
                    scores.extend(tc_frame_scores(&meta.id, &errors, config.tc_variant));
                }
                Method::OracleFp | Method::OracleFn => {
                    let kind =
                        if method == Method::OracleFp { OracleKind::Fp } else { OracleKind::Fn };
                    let gt: Vec<&[GroundTruthObject]> = world.dataset.videos[vi]
                        .ground_truth
                        .iter()
                        .map(|f| f.as_slice())
                        .collect();
                    let dets = filtered_refs(detections, &config.eval);
                    scores.extend(oracle_frame_scores(
                        &meta.id,
                        &gt,
                        &dets,
                        kind,
                        config.eval.iou_threshold,
                    ));
                }
                Method::LeastConfidence | Method::Entropy | Method::Margin => {
                    let kind = match method {
                        Method::LeastConfidence => UncertaintyKind::LeastConfidence,
                        Method::Entropy => UncertaintyKind::Entropy,
                        _ => UncertaintyKind::Margin,
                    };
                    let dets = filtered_refs(detections, &config.eval);
                    scores.extend(uncertainty_frame_scores(&meta.id, &dets, kind));
                }
                Method::Random | Method::RandomR => {
                    scores.extend(random_frame_scores(
                        &meta.id,
                        meta.num_frames,
                        &mut select_rng,
                    ));
                }
            }
        }

        let labeled_before = labeled.len();
        let batch_result = select_batch(&scores, &labeled, &video_lengths, &selection, &mut select_rng)?;
        let error_counts: Vec<BTreeMap<usize, usize>> =
            pool.iter().map(|(_, log)| log.error_counts()).collect();
        for pick in &batch_result.picks {
            labeled.insert(&pick.video, pick.frame);
            let vi = world.dataset.video_index(&pick.video).expect("picked video exists");
            let ti = train.binary_search(&vi).expect("picks stay in the train split");
            let errors = error_counts[ti].get(&pick.frame).copied().unwrap_or(0);
            detector.credit_frame(world, &pick.video, pick.frame, errors);
        }
        curve.push(eval_point(world, &detector, &test, &labeled, total, cycle, seed, &config.eval));
        selections.push(CycleSelection { cycle, labeled_before, batch: batch_result });
    }

    Ok(RunResult { method, seed, test_videos: test, init_labeled, curve, selections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::world::{generate_world, StratumConfig, WorldConfig};

    fn two_strata_config() -> WorldConfig {
        WorldConfig {
            num_videos: 8,
            frames_per_video: (60, 80),
            strata: vec![
                StratumConfig {
                    name: "busy".to_string(),
                    weight: 0.5,
                    classes: vec![(0, 0.6), (1, 0.4)],
                    objects_per_video: (2, 3),
                },
                StratumConfig {
                    name: "calm".to_string(),
                    weight: 0.5,
                    classes: vec![(1, 1.0)],
                    objects_per_video: (1, 2),
                },
            ],
            classes: vec!["a".to_string(), "b".to_string()],
            ..WorldConfig::default()
        }
    }

    fn quick_loop(cycles: usize) -> LoopConfig {
        LoopConfig {
            cycles,
            budget_fraction: 0.03,
            init_fraction: 0.03,
            ..LoopConfig::default()
        }
    }

    #[test]
    fn split_holds_out_part_of_every_eligible_stratum() {
        let world = generate_world(&two_strata_config(), 3).unwrap();
        let (train, test) = split_videos(&world, 0.25, 9);
        assert!(!test.is_empty());
        let merged: Vec<usize> = {
            let mut m: Vec<usize> = train.iter().chain(&test).copied().collect();
            m.sort_unstable();
            m
        };
        assert_eq!(merged, (0..8).collect::<Vec<_>>(), "split partitions the videos");
        for s in 0..world.num_strata() {
            let members = world.strata.iter().filter(|&&x| x == s).count();
            let held = test.iter().filter(|&&vi| world.strata[vi] == s).count();
            assert!(held >= 1, "stratum {s} has {members} videos but none held out");
            assert!(held < members, "stratum {s} fully held out");
        }
        assert_eq!(split_videos(&world, 0.25, 9), (train, test), "split is deterministic");
    }

    #[test]
    fn one_cycle_random_produces_two_curve_points() {
        let world = generate_world(&two_strata_config(), 4).unwrap();
        let result = run_loop(&world, Method::Random, &quick_loop(1), 7).unwrap();
        assert_eq!(result.curve.len(), 2);
        assert_eq!(result.selections.len(), 1);
        assert_eq!(result.curve[0].cycle, 0);
        assert_eq!(result.curve[1].cycle, 1);
    }

    #[test]
    fn labeled_count_grows_by_exactly_one_batch_per_cycle() {
        let world = generate_world(&two_strata_config(), 5).unwrap();
        let config = quick_loop(3);
        let result = run_loop(&world, Method::Entropy, &config, 11).unwrap();
        let metas = &world.dataset.manifest.videos;
        let total: usize = (0..8)
            .filter(|vi| !result.test_videos.contains(vi))
            .map(|vi| metas[vi].num_frames)
            .sum();
        let batch = ((config.budget_fraction * total as f64).round() as usize).max(1);
        let init = ((config.init_fraction * total as f64).round() as usize).max(1);
        for (i, point) in result.curve.iter().enumerate() {
            assert_eq!(point.labeled_frames, init + i * batch);
            assert!((point.labeled_fraction - point.labeled_frames as f64 / total as f64).abs() < 1e-12);
        }
        for (i, sel) in result.selections.iter().enumerate() {
            assert_eq!(sel.labeled_before, init + i * batch);
            assert_eq!(sel.batch.picks.len(), batch);
        }
    }

    #[test]
    fn runs_are_deterministic_and_methods_share_point_zero() {
        let world = generate_world(&two_strata_config(), 6).unwrap();
        let config = quick_loop(2);
        let a = run_loop(&world, Method::Tc, &config, 3).unwrap();
        let b = run_loop(&world, Method::Tc, &config, 3).unwrap();
        assert_eq!(a, b);
        let random = run_loop(&world, Method::Random, &config, 3).unwrap();
        assert_eq!(a.curve[0], random.curve[0], "shared init and eval streams");
        assert_ne!(
            run_loop(&world, Method::Tc, &config, 4).unwrap().curve[0],
            a.curve[0],
            "seed moves the init set"
        );
    }

    #[test]
    fn picks_never_touch_test_videos_or_labeled_frames() {
        let world = generate_world(&two_strata_config(), 7).unwrap();
        let result = run_loop(&world, Method::Margin, &quick_loop(3), 5).unwrap();
        let test_ids: Vec<&str> = result
            .test_videos
            .iter()
            .map(|&vi| world.dataset.manifest.videos[vi].id.as_str())
            .collect();
        let mut seen = FrameSet::new();
        for sel in &result.selections {
            for pick in &sel.batch.picks {
                assert!(!test_ids.contains(&pick.video.as_str()), "picked a held-out video");
                assert!(seen.insert(&pick.video, pick.frame), "picked a frame twice");
            }
        }
    }

    #[test]
    fn budget_beyond_the_pool_is_rejected() {
        let world = generate_world(&two_strata_config(), 8).unwrap();
        let config = LoopConfig {
            cycles: 30,
            budget_fraction: 0.2,
            init_fraction: 0.02,
            ..LoopConfig::default()
        };
        match run_loop(&world, Method::Random, &config, 2) {
            Err(Error::PoolExhausted { needed, available }) => assert!(needed > available),
            other => panic!("expected pool exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let world = generate_world(&two_strata_config(), 9).unwrap();
        for broken in [
            LoopConfig { cycles: 0, ..LoopConfig::default() },
            LoopConfig { budget_fraction: 0.0, ..LoopConfig::default() },
            LoopConfig { test_fraction: 1.0, ..LoopConfig::default() },
            LoopConfig {
                detector: DetectorConfig { kappa: 0.0, ..DetectorConfig::default() },
                ..LoopConfig::default()
            },
        ] {
            assert!(run_loop(&world, Method::Random, &broken, 1).unwrap_err().is_validation());
        }
    }

    #[test]
    fn oracle_picks_concentrate_where_the_detector_is_weak() {
        // Built from the pieces directly: a detector weak in stratum 0 and
        // strong in stratum 1 makes real errors pile up in stratum 0, so an
        // oracle ranking must spend most of its batch there.
        let world = generate_world(&two_strata_config(), 10).unwrap();
        let detector = SurrogateDetector::with_skills(
            DetectorConfig::default(),
            vec![0.05, 0.95],
        );
        let eval = EvalConfig::default();
        let mut scores = Vec::new();
        let mut lengths = BTreeMap::new();
        for vi in 0..8 {
            let meta = &world.dataset.manifest.videos[vi];
            let (detections, _) = detector.detect_one(&world, vi, 21, 1, false);
            let gt: Vec<&[GroundTruthObject]> = world.dataset.videos[vi]
                .ground_truth
                .iter()
                .map(|f| f.as_slice())
                .collect();
            let dets = filtered_refs(&detections, &eval);
            scores.extend(oracle_frame_scores(
                &meta.id,
                &gt,
                &dets,
                OracleKind::Fp,
                eval.iou_threshold,
            ));
            lengths.insert(meta.id.clone(), meta.num_frames);
        }
        let config = SelectionConfig { batch_size: 20, radius: 0, allocation: Allocation::Global };
        let mut rng = substream(21, &[TAG_SELECT, 1]);
        let batch = select_batch(&scores, &FrameSet::new(), &lengths, &config, &mut rng).unwrap();
        let weak: usize = batch
            .picks
            .iter()
            .filter(|p| {
                let vi = world.dataset.video_index(&p.video).unwrap();
                world.strata[vi] == 0
            })
            .count();
        assert!(
            weak >= 16,
            "only {weak}/20 picks landed in the weak stratum"
        );
    }
}
