//! Axis-aligned boxes and the geometric primitives the graph builder and the
//! evaluator share: IoU, greedy NMS, single-link clustering, mean boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates. Invariant: all four values finite,
/// `x_min < x_max`, `y_min < y_max`. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let reason = if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            Some("coordinates must be finite")
        } else if x_min >= x_max || y_min >= y_max {
            Some("min must be strictly below max")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
                reason,
            }),
            None => Ok(BBox {
                x_min,
                y_min,
                x_max,
                y_max,
            }),
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Shift by `(dx, dy)`; size is preserved, so the result is always valid.
    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// True when the box has no positive-area overlap with the image
    /// rectangle `[0, width] x [0, height]`.
    pub fn outside_image(&self, width: f64, height: f64) -> bool {
        self.x_max <= 0.0 || self.y_max <= 0.0 || self.x_min >= width || self.y_min >= height
    }

    /// Intersection with the image rectangle, or an error when nothing with
    /// positive area remains.
    pub fn clamp_to_image(&self, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> [f64; 4] {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Intersection over union, in `[0, 1]`; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression. Returns indices of the kept boxes in
/// descending score order; a box is suppressed when its IoU with an already
/// kept box exceeds `iou_threshold`. Score ties keep input order.
pub fn nms_keep(items: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.partial_cmp(&items[a].1).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept
            .iter()
            .all(|&k| iou(&items[idx].0, &items[k].0) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

pub fn nms(items: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    nms_keep(items, iou_threshold)
        .into_iter()
        .map(|i| items[i])
        .collect()
}

/// Single-link clustering: boxes whose IoU exceeds `iou_threshold` are
/// connected, clusters are the connected components of that relation.
/// Clusters are ordered by their smallest member index, members ascending.
pub fn greedy_cluster(boxes: &[BBox], iou_threshold: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }

    for i in 0..n {
        for j in i + 1..n {
            if iou(&boxes[i], &boxes[j]) > iou_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    parent[hi] = lo;
                }
            }
        }
    }

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut cluster_of_root: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        match cluster_of_root[root] {
            Some(c) => clusters[c].push(i),
            None => {
                cluster_of_root[root] = Some(clusters.len());
                clusters.push(vec![i]);
            }
        }
    }
    clusters
}

/// Coordinate-wise mean of a non-empty set of boxes; the mean of valid boxes
/// is itself valid.
pub fn mean_box(boxes: &[BBox]) -> Option<BBox> {
    if boxes.is_empty() {
        return None;
    }
    let n = boxes.len() as f64;
    let mut acc = [0.0; 4];
    for b in boxes {
        acc[0] += b.x_min;
        acc[1] += b.y_min;
        acc[2] += b.x_max;
        acc[3] += b.y_max;
    }
    Some(BBox {
        x_min: acc[0] / n,
        y_min: acc[1] / n,
        x_max: acc[2] / n,
        y_max: acc[3] / n,
    })
}
