//! Error-label energy over a temporal-coherence graph and its exact
//! minimization.
//!
//! Each node takes one of four labels. Detections are either true positives
//! or false positives, candidates either true negatives or false negatives;
//! the other label pairs are forbidden. Error labels (FP, FN) cost `1 + eps`,
//! correct labels cost 0, and every edge charges 1 when its endpoints
//! disagree about object presence (TP and FN assert presence, FP and TN
//! absence). The epsilon breaks ties toward "no error" when a lone error
//! label and its disagreement cost would otherwise balance.
//!
//! Under the feasible labels the energy is a binary submodular function of
//! presence, so an s-t minimum cut minimizes it exactly. Costs are scaled to
//! integers first; with the 1e-6 epsilon at scale 1e7 two labelings have
//! equal scaled energy only when they agree on both the error count and the
//! disagreement count, and the solver returns the canonical minimum cut (the
//! minimal source side), which is unique and independent of node order.

pub mod maxflow;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::Deserialize;

use crate::dataset::fmt_box;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tcgraph::{NodeKind, TCGraph};
use maxflow::FlowGraph;

/// Integer scale for exact cost arithmetic: one energy unit becomes 1e7.
pub const COST_SCALE: i64 = 10_000_000;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Hard ceiling for [`brute_force_min`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

impl Label {
    /// TP and FN assert an object is present; FP and TN deny it.
    pub fn is_present(self) -> bool {
        matches!(self, Label::TruePositive | Label::FalseNegative)
    }

    pub fn is_error(self) -> bool {
        matches!(self, Label::FalsePositive | Label::FalseNegative)
    }

    pub fn short(self) -> &'static str {
        match self {
            Label::TruePositive => "TP",
            Label::FalsePositive => "FP",
            Label::TrueNegative => "TN",
            Label::FalseNegative => "FN",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    /// Tie-breaking surcharge on error labels, in (0, 1); must survive the
    /// integer scaling, i.e. `epsilon * COST_SCALE >= 1`.
    pub epsilon: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl EnergyModel {
    /// The two labels a node of this kind may take, absent first.
    pub fn feasible(kind: NodeKind) -> [Label; 2] {
        match kind {
            NodeKind::Detection => [Label::FalsePositive, Label::TruePositive],
            NodeKind::Candidate => [Label::TrueNegative, Label::FalseNegative],
        }
    }

    pub fn label_for(kind: NodeKind, present: bool) -> Label {
        match (kind, present) {
            (NodeKind::Detection, true) => Label::TruePositive,
            (NodeKind::Detection, false) => Label::FalsePositive,
            (NodeKind::Candidate, true) => Label::FalseNegative,
            (NodeKind::Candidate, false) => Label::TrueNegative,
        }
    }

    /// Unary cost, or `None` for forbidden kind/label combinations.
    pub fn unary(&self, kind: NodeKind, label: Label) -> Option<f64> {
        if !Self::feasible(kind).contains(&label) {
            return None;
        }
        Some(if label.is_error() { 1.0 + self.epsilon } else { 0.0 })
    }

    /// Disagreement cost: 1 when the labels differ on presence, else 0.
    pub fn pairwise(&self, a: Label, b: Label) -> f64 {
        if a.is_present() != b.is_present() {
            1.0
        } else {
            0.0
        }
    }

    fn error_cost_scaled(&self) -> i64 {
        let eps = (self.epsilon * COST_SCALE as f64).round() as i64;
        assert!(
            eps >= 1 && eps < COST_SCALE,
            "epsilon {} does not survive integer scaling",
            self.epsilon
        );
        COST_SCALE + eps
    }
}

/// The energy restricted to feasible labels, as a binary presence problem
/// with integer costs.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEnergy {
    pub present_cost: Vec<i64>,
    pub absent_cost: Vec<i64>,
    pub edges: Vec<(usize, usize)>,
    pub coherence: i64,
}

pub fn reduce_to_binary(graph: &TCGraph, model: &EnergyModel) -> BinaryEnergy {
    let error = model.error_cost_scaled();
    let mut present_cost = Vec::with_capacity(graph.nodes.len());
    let mut absent_cost = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        match node.kind {
            // A present detection is a TP (free); an absent one an FP.
            NodeKind::Detection => {
                present_cost.push(0);
                absent_cost.push(error);
            }
            // A present candidate is an FN; an absent one a TN (free).
            NodeKind::Candidate => {
                present_cost.push(error);
                absent_cost.push(0);
            }
        }
    }
    BinaryEnergy {
        present_cost,
        absent_cost,
        edges: graph.edges.clone(),
        coherence: COST_SCALE,
    }
}

pub fn scaled_energy(energy: &BinaryEnergy, present: &[bool]) -> i64 {
    let unary: i64 = present
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p {
                energy.present_cost[i]
            } else {
                energy.absent_cost[i]
            }
        })
        .sum();
    let cuts = energy
        .edges
        .iter()
        .filter(|&&(u, v)| present[u] != present[v])
        .count() as i64;
    unary + cuts * energy.coherence
}

/// Exact minimizer via s-t min cut; returns the canonical (minimal source
/// side) presence assignment and the scaled minimum energy.
pub fn min_cut_solve(energy: &BinaryEnergy) -> (Vec<bool>, i64) {
    let n = energy.present_cost.len();
    let (s, t) = (n, n + 1);
    let mut flow = FlowGraph::new(n + 2);
    for v in 0..n {
        // An edge is cut when its tail stays on the source (present) side:
        // v -> t charges the present cost, s -> v the absent cost.
        if energy.present_cost[v] > 0 {
            flow.add_edge(v, t, energy.present_cost[v], 0);
        }
        if energy.absent_cost[v] > 0 {
            flow.add_edge(s, v, energy.absent_cost[v], 0);
        }
    }
    for &(u, v) in &energy.edges {
        flow.add_edge(u, v, energy.coherence, energy.coherence);
    }
    let value = flow.max_flow(s, t);
    let side = flow.min_cut_source_side(s);
    let present: Vec<bool> = (0..n).map(|v| side[v]).collect();
    debug_assert_eq!(scaled_energy(energy, &present), value);
    (present, value)
}

pub fn assign_labels(graph: &TCGraph, present: &[bool]) -> Vec<Label> {
    graph
        .nodes
        .iter()
        .zip(present)
        .map(|(node, &p)| EnergyModel::label_for(node.kind, p))
        .collect()
}

/// Estimated errors of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameErrors {
    pub fp_count: usize,
    pub fn_count: usize,
    pub fp_boxes: Vec<BBox>,
    pub fn_boxes: Vec<BBox>,
}

impl FrameErrors {
    fn merge(&mut self, other: &FrameErrors) {
        self.fp_count += other.fp_count;
        self.fn_count += other.fn_count;
        self.fp_boxes.extend(other.fp_boxes.iter().copied());
        self.fn_boxes.extend(other.fn_boxes.iter().copied());
    }
}

/// A minimizing labeling with its exact scaled energy and the per-frame
/// error tally (every frame holding at least one node appears).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSolution {
    pub labels: Vec<Label>,
    pub energy_scaled: i64,
    pub frames: BTreeMap<usize, FrameErrors>,
}

impl LabelSolution {
    pub fn energy(&self) -> f64 {
        self.energy_scaled as f64 / COST_SCALE as f64
    }

    pub fn error_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_error()).count()
    }
}

fn build_solution(graph: &TCGraph, present: &[bool], energy_scaled: i64) -> LabelSolution {
    let labels = assign_labels(graph, present);
    let mut frames: BTreeMap<usize, FrameErrors> = BTreeMap::new();
    for (node, &label) in graph.nodes.iter().zip(&labels) {
        let entry = frames.entry(node.frame).or_default();
        match label {
            Label::FalsePositive => {
                entry.fp_count += 1;
                entry.fp_boxes.push(node.bbox);
            }
            Label::FalseNegative => {
                entry.fn_count += 1;
                entry.fn_boxes.push(node.bbox);
            }
            _ => {}
        }
    }
    LabelSolution {
        labels,
        energy_scaled,
        frames,
    }
}

/// Minimize the energy of one graph exactly.
pub fn solve(graph: &TCGraph, model: &EnergyModel) -> LabelSolution {
    if graph.nodes.is_empty() {
        return LabelSolution {
            labels: Vec::new(),
            energy_scaled: 0,
            frames: BTreeMap::new(),
        };
    }
    let binary = reduce_to_binary(graph, model);
    let (present, energy_scaled) = min_cut_solve(&binary);
    build_solution(graph, &present, energy_scaled)
}

/// Reference minimizer by exhaustive enumeration, for graphs of at most
/// [`BRUTE_FORCE_LIMIT`] nodes. Equal-energy labelings necessarily carry the
/// same error count (see the module docs), so the first minimum found wins.
pub fn brute_force_min(graph: &TCGraph, model: &EnergyModel) -> Result<LabelSolution> {
    let n = graph.nodes.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            nodes: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let binary = reduce_to_binary(graph, model);
    let mut best_mask = 0u32;
    let mut best = i64::MAX;
    for mask in 0u32..1 << n {
        let present: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let value = scaled_energy(&binary, &present);
        if value < best {
            best = value;
            best_mask = mask;
        }
    }
    let present: Vec<bool> = (0..n).map(|i| best_mask >> i & 1 == 1).collect();
    Ok(build_solution(graph, &present, best))
}

/// Sum per-frame errors of several solutions (the class graphs of one video)
/// into a dense per-frame list.
pub fn aggregate_frame_errors(num_frames: usize, solutions: &[LabelSolution]) -> Vec<FrameErrors> {
    let mut frames = vec![FrameErrors::default(); num_frames];
    for solution in solutions {
        for (&frame, errors) in &solution.frames {
            frames[frame].merge(errors);
        }
    }
    frames
}

/// One line per frame: counts and boxes of the estimated errors.
pub fn write_errors_jsonl(frames: &[FrameErrors], w: &mut impl Write) -> std::io::Result<()> {
    for (frame, e) in frames.iter().enumerate() {
        let boxes = |list: &[BBox]| {
            list.iter()
                .map(fmt_box)
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            w,
            r#"{{"frame":{},"fp":{},"fn":{},"fp_boxes":[{}],"fn_boxes":[{}]}}"#,
            frame,
            e.fp_count,
            e.fn_count,
            boxes(&e.fp_boxes),
            boxes(&e.fn_boxes)
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorRow {
    frame: usize,
    #[serde(rename = "fp")]
    fp_count: usize,
    #[serde(rename = "fn")]
    fn_count: usize,
    fp_boxes: Vec<BBox>,
    fn_boxes: Vec<BBox>,
}

/// Read back a per-frame error file; lines must cover frames 0.. in order.
pub fn read_errors_jsonl(path: &Path, reader: impl BufRead) -> Result<Vec<FrameErrors>> {
    let mut frames = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let row: ErrorRow = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if row.frame != frames.len() {
            return Err(parse(format!(
                "expected frame {}, found {}",
                frames.len(),
                row.frame
            )));
        }
        if row.fp_count != row.fp_boxes.len() || row.fn_count != row.fn_boxes.len() {
            return Err(parse("error counts do not match box lists".to_string()));
        }
        frames.push(FrameErrors {
            fp_count: row.fp_count,
            fn_count: row.fn_count,
            fp_boxes: row.fp_boxes,
            fn_boxes: row.fn_boxes,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcgraph::Node;
    use proptest::prelude::*;

    fn node(kind: NodeKind, frame: usize) -> Node {
        Node {
            kind,
            frame,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            sources: vec![(frame, 0)],
        }
    }

    fn graph(nodes: Vec<Node>, edges: Vec<(usize, usize)>) -> TCGraph {
        TCGraph {
            video_id: "v".to_string(),
            class_id: 0,
            nodes,
            edges,
        }
    }

    const ERROR_SCALED: i64 = COST_SCALE + 10;

    #[test]
    fn pairwise_matrix_is_presence_disagreement() {
        use Label::*;
        let model = EnergyModel::default();
        let order = [TruePositive, FalsePositive, TrueNegative, FalseNegative];
        let expected = [
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 1.0, 0.0],
        ];
        for (i, &a) in order.iter().enumerate() {
            for (j, &b) in order.iter().enumerate() {
                assert_eq!(model.pairwise(a, b), expected[i][j], "{a} vs {b}");
            }
        }
    }

    #[test]
    fn unary_costs_and_forbidden_labels() {
        use Label::*;
        let model = EnergyModel::default();
        let eps = model.epsilon;
        assert_eq!(model.unary(NodeKind::Detection, TruePositive), Some(0.0));
        assert_eq!(
            model.unary(NodeKind::Detection, FalsePositive),
            Some(1.0 + eps)
        );
        assert_eq!(model.unary(NodeKind::Detection, TrueNegative), None);
        assert_eq!(model.unary(NodeKind::Detection, FalseNegative), None);
        assert_eq!(model.unary(NodeKind::Candidate, TrueNegative), Some(0.0));
        assert_eq!(
            model.unary(NodeKind::Candidate, FalseNegative),
            Some(1.0 + eps)
        );
        assert_eq!(model.unary(NodeKind::Candidate, TruePositive), None);
        assert_eq!(model.unary(NodeKind::Candidate, FalsePositive), None);
    }

    #[test]
    fn isolated_flicker_is_a_false_positive() {
        // One detection, two candidates spawned from it: calling the
        // detection an FP costs 1 + eps, any alternative at least 2.
        let g = graph(
            vec![
                node(NodeKind::Detection, 1),
                node(NodeKind::Candidate, 0),
                node(NodeKind::Candidate, 2),
            ],
            vec![(0, 1), (0, 2)],
        );
        let model = EnergyModel::default();
        let solution = solve(&g, &model);
        use Label::*;
        assert_eq!(solution.labels, vec![FalsePositive, TrueNegative, TrueNegative]);
        assert_eq!(solution.energy_scaled, ERROR_SCALED);
        assert_eq!(solution.frames[&1].fp_count, 1);
        assert_eq!(solution.frames[&0].fp_count + solution.frames[&0].fn_count, 0);
        let brute = brute_force_min(&g, &model).unwrap();
        assert_eq!(brute.labels, solution.labels);
        assert_eq!(brute.energy_scaled, solution.energy_scaled);
    }

    #[test]
    fn track_gap_is_a_false_negative() {
        // Two detections bridged by one candidate: filling the gap (FN)
        // costs 1 + eps, leaving it empty cuts two edges.
        let g = graph(
            vec![
                node(NodeKind::Detection, 0),
                node(NodeKind::Detection, 2),
                node(NodeKind::Candidate, 1),
            ],
            vec![(0, 2), (1, 2)],
        );
        let model = EnergyModel::default();
        let solution = solve(&g, &model);
        use Label::*;
        assert_eq!(
            solution.labels,
            vec![TruePositive, TruePositive, FalseNegative]
        );
        assert_eq!(solution.energy_scaled, ERROR_SCALED);
        assert_eq!(solution.frames[&1].fn_count, 1);
        assert_eq!(solution.frames[&1].fn_boxes.len(), 1);
        let brute = brute_force_min(&g, &model).unwrap();
        assert_eq!(brute.labels, solution.labels);
    }

    #[test]
    fn balanced_pair_prefers_no_error() {
        // One detection, one candidate: without epsilon, (TP, TN) at cost 1
        // would tie (FP, TN) and (TP, FN) at cost 1; the surcharge makes the
        // error-free labeling strictly cheaper.
        let g = graph(
            vec![node(NodeKind::Detection, 0), node(NodeKind::Candidate, 1)],
            vec![(0, 1)],
        );
        let model = EnergyModel::default();
        let solution = solve(&g, &model);
        use Label::*;
        assert_eq!(solution.labels, vec![TruePositive, TrueNegative]);
        assert_eq!(solution.energy_scaled, COST_SCALE);
        assert_eq!(solution.error_count(), 0);
        let brute = brute_force_min(&g, &model).unwrap();
        assert_eq!(brute.labels, solution.labels);
        assert_eq!(brute.energy_scaled, COST_SCALE);
    }

    #[test]
    fn exact_ties_resolve_canonically() {
        // d0 supports candidates c2 (alone) and c3 (shared with d1):
        // (FP, TP, TN, TN) and (TP, TP, TN, FN) both cost 2 + eps. The
        // canonical cut picks the minimal present set deterministically and
        // enumeration confirms the tie.
        let g = graph(
            vec![
                node(NodeKind::Detection, 0),
                node(NodeKind::Detection, 1),
                node(NodeKind::Candidate, 0),
                node(NodeKind::Candidate, 1),
            ],
            vec![(0, 2), (0, 3), (1, 3)],
        );
        let model = EnergyModel::default();
        let solution = solve(&g, &model);
        let brute = brute_force_min(&g, &model).unwrap();
        assert_eq!(solution.energy_scaled, 2 * COST_SCALE + 10);
        assert_eq!(brute.energy_scaled, solution.energy_scaled);
        assert_eq!(solution.error_count(), 1);
        assert_eq!(brute.error_count(), 1);
        // Rerunning yields the identical labeling.
        assert_eq!(solve(&g, &model).labels, solution.labels);
    }

    #[test]
    fn empty_graph_solves_to_nothing() {
        let g = graph(Vec::new(), Vec::new());
        let model = EnergyModel::default();
        let solution = solve(&g, &model);
        assert_eq!(solution.energy_scaled, 0);
        assert!(solution.labels.is_empty());
        assert!(solution.frames.is_empty());
        assert_eq!(brute_force_min(&g, &model).unwrap(), solution);
    }

    #[test]
    fn brute_force_rejects_large_graphs() {
        let nodes: Vec<Node> = (0..21).map(|i| node(NodeKind::Detection, i)).collect();
        let g = graph(nodes, Vec::new());
        assert!(matches!(
            brute_force_min(&g, &EnergyModel::default()),
            Err(Error::TooLarge { nodes: 21, limit: 20 })
        ));
    }

    #[test]
    fn errors_jsonl_round_trip() {
        let g = graph(
            vec![
                node(NodeKind::Detection, 1),
                node(NodeKind::Candidate, 0),
                node(NodeKind::Candidate, 2),
            ],
            vec![(0, 1), (0, 2)],
        );
        let solution = solve(&g, &EnergyModel::default());
        let frames = aggregate_frame_errors(3, &[solution]);
        let mut buf = Vec::new();
        write_errors_jsonl(&frames, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().contains("\"fp\":1"));
        let back = read_errors_jsonl(Path::new("errors.jsonl"), &buf[..]).unwrap();
        assert_eq!(back, frames);
    }

    /// Random graphs shaped like builder output: detections first, then
    /// candidates, edges between detections or candidate-detection pairs.
    fn arb_graph() -> impl Strategy<Value = TCGraph> {
        (1usize..7, 0usize..4).prop_flat_map(|(num_det, num_cand)| {
            let n = num_det + num_cand;
            let mut pairs = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if u < num_det || v < num_det {
                        pairs.push((u, v));
                    }
                }
            }
            let edges: BoxedStrategy<std::collections::BTreeSet<(usize, usize)>> =
                if pairs.is_empty() {
                    Just(std::collections::BTreeSet::new()).boxed()
                } else {
                    let limit = pairs.len().min(12);
                    prop::collection::btree_set(prop::sample::select(pairs), 0..=limit).boxed()
                };
            edges.prop_map(move |edges| {
                let nodes = (0..n)
                    .map(|i| {
                        let kind = if i < num_det {
                            NodeKind::Detection
                        } else {
                            NodeKind::Candidate
                        };
                        node(kind, i % 5)
                    })
                    .collect();
                graph(nodes, edges.into_iter().collect())
            })
        })
    }

    proptest! {
        #[test]
        fn min_cut_matches_enumeration(g in arb_graph()) {
            let model = EnergyModel::default();
            let solution = solve(&g, &model);
            let brute = brute_force_min(&g, &model).unwrap();
            prop_assert_eq!(solution.energy_scaled, brute.energy_scaled);
            prop_assert_eq!(solution.error_count(), brute.error_count());
        }

        #[test]
        fn labels_are_always_feasible(g in arb_graph()) {
            let solution = solve(&g, &EnergyModel::default());
            for (node, &label) in g.nodes.iter().zip(&solution.labels) {
                prop_assert!(EnergyModel::feasible(node.kind).contains(&label));
            }
            // Frame tallies agree with the labels.
            let fp = solution.labels.iter().filter(|l| **l == Label::FalsePositive).count();
            let total: usize = solution.frames.values().map(|e| e.fp_count).sum();
            prop_assert_eq!(fp, total);
        }

        #[test]
        fn reported_energy_matches_assignment(g in arb_graph()) {
            let model = EnergyModel::default();
            let binary = reduce_to_binary(&g, &model);
            let (present, value) = min_cut_solve(&binary);
            prop_assert_eq!(scaled_energy(&binary, &present), value);
        }

        #[test]
        fn supporting_edge_between_present_nodes_changes_nothing(g in arb_graph()) {
            let model = EnergyModel::default();
            let solution = solve(&g, &model);
            let present: Vec<usize> = solution
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_present())
                .map(|(i, _)| i)
                .collect();
            // Find a non-adjacent present pair involving a detection.
            let num_det = g.num_detections();
            let pair = present.iter().enumerate().find_map(|(idx, &u)| {
                present[idx + 1..]
                    .iter()
                    .find(|&&v| {
                        (u < num_det || v < num_det) && !g.edges.contains(&(u, v))
                    })
                    .map(|&v| (u, v))
            });
            if let Some((u, v)) = pair {
                let mut g2 = g.clone();
                g2.edges.push((u, v));
                g2.edges.sort_unstable();
                let solution2 = solve(&g2, &model);
                prop_assert_eq!(solution2.labels, solution.labels);
                prop_assert_eq!(solution2.energy_scaled, solution.energy_scaled);
            }
        }
    }
}
