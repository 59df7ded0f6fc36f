//! Temporal-coherence graph construction.
//!
//! Per video and class: detections surviving a score threshold and NMS become
//! detection nodes; each is tracked into every frame within the temporal
//! window. A tracked box overlapping a detection in its target frame links
//! the two detections; tracked boxes matching nothing are clustered into
//! candidate nodes (hypothetical missed objects), each edged to the
//! detections that spawned it. Candidates never connect to each other.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_box, Dataset, Detection, MotionField, VideoMeta};
use crate::error::{Error, Result};
use crate::geometry::{greedy_cluster, iou, mean_box, nms_keep, BBox};
use crate::tracker::{propagate_all, MotionFieldTracker, TrackedBox, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TCConfig {
    /// Minimum IoU (strict) between a tracked box and a detection for a link.
    pub link_threshold: f64,
    /// Minimum IoU (strict) for unmatched tracked boxes to share a candidate.
    pub cluster_threshold: f64,
    /// Detections below this score are ignored entirely.
    pub det_score_threshold: f64,
    /// NMS suppression threshold applied per frame and class before building.
    pub nms_threshold: f64,
    /// Temporal window in frames, each direction.
    pub window: usize,
}

impl Default for TCConfig {
    fn default() -> Self {
        TCConfig {
            link_threshold: 0.5,
            cluster_threshold: 0.5,
            det_score_threshold: 0.5,
            nms_threshold: 0.5,
            window: 3,
        }
    }
}

impl TCConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("link_threshold", self.link_threshold),
            ("cluster_threshold", self.cluster_threshold),
            ("det_score_threshold", self.det_score_threshold),
            ("nms_threshold", self.nms_threshold),
        ] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::validation(format!(
                    "tc.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Detection,
    Candidate,
}

/// Graph node. For detections `sources` is the single (frame, detection
/// index) it came from; for candidates it lists the originating detections.
/// Indices refer to the unfiltered per-frame detection lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub frame: usize,
    pub bbox: BBox,
    pub sources: Vec<(usize, usize)>,
}

/// Temporal-coherence graph of one (video, class) pair. Nodes are ordered
/// detections first (by frame, then detection index), candidates after (by
/// frame, then cluster); edges are deduplicated with `u < v`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct TCGraph {
    pub video_id: String,
    pub class_id: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
}

impl TCGraph {
    pub fn num_detections(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Detection)
            .count()
    }
}

/// Link detections through tracked boxes: an edge connects (frame i, index k)
/// and (frame j, index l) when a box tracked from either one into the other's
/// frame overlaps it with IoU above `threshold`. Indices refer to `local`;
/// returned pairs are deduplicated, frame-ordered and sorted.
pub fn link_detections(
    local: &[Vec<BBox>],
    tracked: &[Vec<TrackedBox>],
    threshold: f64,
) -> Vec<((usize, usize), (usize, usize))> {
    let mut edges = BTreeSet::new();
    for (frame, boxes) in local.iter().enumerate() {
        for tb in &tracked[frame] {
            for (l, bbox) in boxes.iter().enumerate() {
                if iou(&tb.bbox, bbox) > threshold {
                    let a = (tb.source_frame, tb.source_index);
                    let b = (frame, l);
                    edges.insert(if a < b { (a, b) } else { (b, a) });
                }
            }
        }
    }
    edges.into_iter().collect()
}

/// A hypothetical missed object: the mean box of a cluster of unmatched
/// tracked boxes. `sources` indexes `local` like [`link_detections`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub frame: usize,
    pub bbox: BBox,
    pub sources: Vec<(usize, usize)>,
}

/// Cluster tracked boxes that match no detection in their target frame
/// (max IoU at most `link_threshold`) and emit one candidate per cluster.
/// Ordered by (frame, cluster); cluster order follows the tracked lists.
pub fn generate_candidates(
    local: &[Vec<BBox>],
    tracked: &[Vec<TrackedBox>],
    link_threshold: f64,
    cluster_threshold: f64,
) -> Vec<Candidate> {
    let mut candidates = Vec::new();
    for (frame, boxes) in local.iter().enumerate() {
        let unmatched: Vec<&TrackedBox> = tracked[frame]
            .iter()
            .filter(|tb| boxes.iter().all(|b| iou(&tb.bbox, b) <= link_threshold))
            .collect();
        if unmatched.is_empty() {
            continue;
        }
        let cluster_boxes: Vec<BBox> = unmatched.iter().map(|tb| tb.bbox).collect();
        for cluster in greedy_cluster(&cluster_boxes, cluster_threshold) {
            let members: Vec<BBox> = cluster.iter().map(|&i| cluster_boxes[i]).collect();
            let sources: BTreeSet<(usize, usize)> = cluster
                .iter()
                .map(|&i| (unmatched[i].source_frame, unmatched[i].source_index))
                .collect();
            candidates.push(Candidate {
                frame,
                bbox: mean_box(&members).expect("clusters are non-empty"),
                sources: sources.into_iter().collect(),
            });
        }
    }
    candidates
}

/// Build the graph for one (video, class) pair from unfiltered detections.
pub fn build_class_graph(
    meta: &VideoMeta,
    detections: &[Vec<Detection>],
    motion: &[MotionField],
    class_id: usize,
    config: &TCConfig,
) -> Result<TCGraph> {
    // Keep same-class detections above the score threshold, then NMS. The
    // order does not matter here: a suppressed survivor would need a
    // higher-scoring overlapping box, which the threshold cannot remove.
    let mut orig_index: Vec<Vec<usize>> = Vec::with_capacity(detections.len());
    let mut filtered: Vec<Vec<Detection>> = Vec::with_capacity(detections.len());
    let mut local_boxes: Vec<Vec<BBox>> = Vec::with_capacity(detections.len());
    for dets in detections {
        let above: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class_id == class_id && d.score >= config.det_score_threshold)
            .collect();
        let items: Vec<(BBox, f64)> = above.iter().map(|(_, d)| (d.bbox, d.score)).collect();
        let mut keep = nms_keep(&items, config.nms_threshold);
        keep.sort_unstable();
        orig_index.push(keep.iter().map(|&k| above[k].0).collect());
        filtered.push(keep.iter().map(|&k| above[k].1.clone()).collect());
        local_boxes.push(keep.iter().map(|&k| items[k].0).collect());
    }

    let tracker = MotionFieldTracker::new(motion);
    let tracked = propagate_all(
        &filtered,
        &tracker,
        &TrackerConfig {
            window: config.window,
        },
        meta.width,
        meta.height,
    )?;

    let links = link_detections(&local_boxes, &tracked, config.link_threshold);
    let candidates = generate_candidates(
        &local_boxes,
        &tracked,
        config.link_threshold,
        config.cluster_threshold,
    );

    // Detection nodes in (frame, index) order, then candidates.
    let mut nodes = Vec::new();
    let mut det_node: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (frame, boxes) in local_boxes.iter().enumerate() {
        for (k, bbox) in boxes.iter().enumerate() {
            det_node.insert((frame, k), nodes.len());
            nodes.push(Node {
                kind: NodeKind::Detection,
                frame,
                bbox: *bbox,
                sources: vec![(frame, orig_index[frame][k])],
            });
        }
    }
    let mut edges = BTreeSet::new();
    for (a, b) in links {
        edges.insert((det_node[&a], det_node[&b]));
    }
    for cand in candidates {
        let id = nodes.len();
        for src in &cand.sources {
            let det_id = det_node[src];
            edges.insert((det_id.min(id), det_id.max(id)));
        }
        nodes.push(Node {
            kind: NodeKind::Candidate,
            frame: cand.frame,
            bbox: cand.bbox,
            sources: cand
                .sources
                .iter()
                .map(|&(f, k)| (f, orig_index[f][k]))
                .collect(),
        });
    }

    Ok(TCGraph {
        video_id: meta.id.clone(),
        class_id,
        nodes,
        edges: edges.into_iter().collect(),
    })
}

/// Graphs for every class of one video, class index ascending.
pub fn build_video_graphs(
    meta: &VideoMeta,
    detections: &[Vec<Detection>],
    motion: &[MotionField],
    num_classes: usize,
    config: &TCConfig,
) -> Result<Vec<TCGraph>> {
    (0..num_classes)
        .map(|class_id| build_class_graph(meta, detections, motion, class_id, config))
        .collect()
}

/// Graphs for every (video, class) pair of the dataset, built in parallel,
/// ordered by manifest video order then class.
pub fn build_graphs(dataset: &Dataset, config: &TCConfig) -> Result<Vec<TCGraph>> {
    let per_video: Vec<Vec<TCGraph>> = dataset
        .manifest
        .videos
        .par_iter()
        .zip(dataset.videos.par_iter())
        .map(|(meta, data)| {
            build_video_graphs(
                meta,
                &data.detections,
                &data.motion,
                dataset.manifest.num_classes(),
                config,
            )
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

/// Dump one graph as JSONL: node lines first, then edge lines.
pub fn write_graph_jsonl(graph: &TCGraph, w: &mut impl Write) -> std::io::Result<()> {
    for (id, node) in graph.nodes.iter().enumerate() {
        let kind = match node.kind {
            NodeKind::Detection => "detection",
            NodeKind::Candidate => "candidate",
        };
        let sources: Vec<String> = node
            .sources
            .iter()
            .map(|(f, k)| format!("[{f},{k}]"))
            .collect();
        writeln!(
            w,
            r#"{{"node":{{"id":{},"kind":"{}","frame":{},"class":{},"box":{},"sources":[{}]}}}}"#,
            id,
            kind,
            node.frame,
            graph.class_id,
            fmt_box(&node.bbox),
            sources.join(",")
        )?;
    }
    for (u, v) in &graph.edges {
        writeln!(w, r#"{{"edge":[{u},{v}]}}"#)?;
    }
    Ok(())
}
