//! Propagating detections into neighbouring frames along motion fields.
//!
//! Tracking is pure translation of the box by the motion vector sampled at
//! the box center, one frame step at a time; box size is preserved. The
//! tracker is a trait so the motion model can be swapped out.

use crate::dataset::{Detection, MotionField};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// A detection carried from its source frame into a nearby target frame.
/// `source_index` indexes the per-frame detection list handed to
/// [`propagate_all`]; the video is implicit in that call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub source_frame: usize,
    pub source_index: usize,
    pub target_frame: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Temporal window: detections are tracked into every frame within
    /// `window` steps of their source frame.
    pub window: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { window: 3 }
    }
}

pub trait BoxTracker {
    /// Carry `bbox` from frame `from` to frame `to` (either direction).
    fn propagate(&self, bbox: &BBox, from: usize, to: usize) -> Result<BBox>;
}

/// Tracker backed by dense per-frame-pair motion grids. `fields[t]` maps
/// frame `t` to `t + 1`; backward steps use the stored backward grid when
/// present and the negated forward vector sampled at the query point
/// otherwise (exact for static scenes, an approximation for moving ones).
pub struct MotionFieldTracker<'a> {
    fields: &'a [MotionField],
}

impl<'a> MotionFieldTracker<'a> {
    pub fn new(fields: &'a [MotionField]) -> Self {
        MotionFieldTracker { fields }
    }

    fn field(&self, pair: usize) -> Result<&MotionField> {
        self.fields
            .get(pair)
            .filter(|f| f.frame == pair)
            .ok_or(Error::MissingMotion {
                from: pair,
                to: pair + 1,
            })
    }
}

impl BoxTracker for MotionFieldTracker<'_> {
    fn propagate(&self, bbox: &BBox, from: usize, to: usize) -> Result<BBox> {
        let mut current = *bbox;
        if to >= from {
            for t in from..to {
                let (cx, cy) = current.center();
                let (dx, dy) = self.field(t)?.forward_at(cx, cy);
                current = current.translate(dx, dy);
            }
        } else {
            for t in (to..from).rev() {
                // Step t + 1 -> t via the field covering the pair (t, t + 1).
                let (cx, cy) = current.center();
                let (dx, dy) = self.field(t)?.backward_at(cx, cy);
                current = current.translate(dx, dy);
            }
        }
        Ok(current)
    }
}

/// Track one detection from `from` to `to` along `fields`. `source_index` in
/// the result is 0; [`propagate_all`] fills real list indices.
pub fn propagate(
    detection: &Detection,
    from: usize,
    to: usize,
    fields: &[MotionField],
) -> Result<TrackedBox> {
    let bbox = MotionFieldTracker::new(fields).propagate(&detection.bbox, from, to)?;
    Ok(TrackedBox {
        source_frame: from,
        source_index: 0,
        target_frame: to,
        class_id: detection.class_id,
        bbox,
    })
}

/// Track every detection into every other frame within the window. Returns
/// one list per target frame, ordered by (source frame, source index). Boxes
/// that end up entirely outside the image are dropped; partially visible
/// ones are kept.
pub fn propagate_all(
    detections: &[Vec<Detection>],
    tracker: &dyn BoxTracker,
    config: &TrackerConfig,
    width: u32,
    height: u32,
) -> Result<Vec<Vec<TrackedBox>>> {
    let num_frames = detections.len();
    let mut tracked: Vec<Vec<TrackedBox>> = vec![Vec::new(); num_frames];
    for (frame, dets) in detections.iter().enumerate() {
        let lo = frame.saturating_sub(config.window);
        let hi = (frame + config.window).min(num_frames.saturating_sub(1));
        for (index, det) in dets.iter().enumerate() {
            for target in lo..=hi {
                if target == frame {
                    continue;
                }
                let bbox = tracker.propagate(&det.bbox, frame, target)?;
                if bbox.outside_image(width as f64, height as f64) {
                    continue;
                }
                tracked[target].push(TrackedBox {
                    source_frame: frame,
                    source_index: index,
                    target_frame: target,
                    class_id: det.class_id,
                    bbox,
                });
            }
        }
    }
    for list in &mut tracked {
        list.sort_by_key(|tb| (tb.source_frame, tb.source_index));
    }
    Ok(tracked)
}
