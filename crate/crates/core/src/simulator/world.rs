//! Synthetic video worlds: tracked objects on piecewise-linear trajectories
//! with bounded turn rate, plus motion fields exactly consistent with the
//! boxes they move.
//!
//! Every coordinate, size, and velocity sits on the 1/64-pixel grid. 64
//! divides 10^6, so grid values are dyadic (coordinate sums and differences
//! are exact in f64) and have at most six fractional decimal digits (the
//! on-disk format is lossless). Propagating a ground-truth box through the
//! motion fields therefore reproduces the next box bit for bit wherever
//! objects do not overlap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{substream, TAG_WORLD};
use crate::dataset::{
    Dataset, DatasetManifest, GroundTruthObject, MotionField, VideoData, VideoMeta,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Nearest point on the 1/64-pixel grid.
pub(crate) fn snap64(x: f64) -> f64 {
    (x * 64.0).round() / 64.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumConfig {
    pub name: String,
    /// Fraction of videos assigned here (normalized over all strata).
    pub weight: f64,
    /// Spawnable foreground classes as (class id, relative weight).
    pub classes: Vec<(usize, f64)>,
    /// Inclusive range of object count per video.
    pub objects_per_video: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_videos: usize,
    /// Foreground class names.
    pub classes: Vec<String>,
    /// Inclusive range of frames per video.
    pub frames_per_video: (usize, usize),
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Motion-field cell size in pixels.
    pub cell_size: u32,
    pub strata: Vec<StratumConfig>,
    /// Inclusive range of object lifetime in frames (clamped to the video).
    pub min_lifetime: usize,
    pub max_lifetime: usize,
    /// Inclusive range of box side length in pixels.
    pub size_range: (f64, f64),
    /// Inclusive range of object speed in pixels per frame.
    pub speed_range: (f64, f64),
    /// Inclusive range of frames between velocity changes.
    pub segment_frames: (usize, usize),
    /// Largest direction change at a segment boundary, radians.
    pub max_turn: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_videos: 20,
            classes: (0..5).map(|i| format!("c{i}")).collect(),
            frames_per_video: (100, 300),
            width: 640,
            height: 480,
            fps: 10.0,
            cell_size: 32,
            strata: default_strata(),
            min_lifetime: 15,
            max_lifetime: 60,
            size_range: (24.0, 56.0),
            speed_range: (0.5, 3.0),
            segment_frames: (8, 20),
            max_turn: 0.6,
        }
    }
}

/// Unbalanced mix: half the videos are busy two-class scenes, and the last
/// class exists only in the smallest stratum.
fn default_strata() -> Vec<StratumConfig> {
    vec![
        StratumConfig {
            name: "common".to_string(),
            weight: 0.50,
            classes: vec![(0, 0.6), (1, 0.4)],
            objects_per_video: (2, 4),
        },
        StratumConfig {
            name: "paired".to_string(),
            weight: 0.25,
            classes: vec![(0, 0.3), (1, 0.3), (2, 0.4)],
            objects_per_video: (1, 3),
        },
        StratumConfig {
            name: "sparse".to_string(),
            weight: 0.15,
            classes: vec![(2, 0.5), (3, 0.5)],
            objects_per_video: (1, 2),
        },
        StratumConfig {
            name: "special".to_string(),
            weight: 0.10,
            classes: vec![(3, 0.3), (4, 0.7)],
            objects_per_video: (1, 2),
        },
    ]
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::validation("world needs at least one video"));
        }
        if self.classes.is_empty() {
            return Err(Error::validation("world needs at least one class"));
        }
        if self.strata.is_empty() {
            return Err(Error::validation("world needs at least one stratum"));
        }
        for s in &self.strata {
            if !(s.weight.is_finite() && s.weight > 0.0) {
                return Err(Error::validation(format!(
                    "stratum {:?} has invalid weight {}",
                    s.name, s.weight
                )));
            }
            if s.objects_per_video.0 > s.objects_per_video.1 {
                return Err(Error::validation(format!(
                    "stratum {:?} has an empty object range",
                    s.name
                )));
            }
            if s.objects_per_video.1 > 0 {
                if s.classes.is_empty() {
                    return Err(Error::validation(format!(
                        "stratum {:?} spawns objects but lists no classes",
                        s.name
                    )));
                }
                let total: f64 = s.classes.iter().map(|(_, w)| w).sum();
                if !(total.is_finite() && total > 0.0)
                    || s.classes.iter().any(|(_, w)| !w.is_finite() || *w < 0.0)
                {
                    return Err(Error::validation(format!(
                        "stratum {:?} has invalid class weights",
                        s.name
                    )));
                }
            }
            if let Some((c, _)) = s.classes.iter().find(|(c, _)| *c >= self.classes.len()) {
                return Err(Error::validation(format!(
                    "stratum {:?} references class {c}, but there are {}",
                    s.name,
                    self.classes.len()
                )));
            }
        }
        let (flo, fhi) = self.frames_per_video;
        if flo < 1 || flo > fhi {
            return Err(Error::validation("invalid frames_per_video range"));
        }
        if self.width == 0 || self.height == 0 || self.cell_size == 0 {
            return Err(Error::validation("image and cell dimensions must be positive"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::validation("fps must be positive"));
        }
        let (slo, shi) = self.size_range;
        let max_side = f64::from(self.width.min(self.height));
        if !(slo.is_finite() && shi.is_finite()) || slo < 2.0 || slo > shi || shi > max_side {
            return Err(Error::validation(format!(
                "size_range must lie in [2, {max_side}]"
            )));
        }
        let (vlo, vhi) = self.speed_range;
        if !(vlo.is_finite() && vhi.is_finite()) || vlo < 0.0 || vlo > vhi {
            return Err(Error::validation("invalid speed_range"));
        }
        if self.min_lifetime < 1 || self.min_lifetime > self.max_lifetime {
            return Err(Error::validation("invalid lifetime range"));
        }
        if self.segment_frames.0 < 1 || self.segment_frames.0 > self.segment_frames.1 {
            return Err(Error::validation("invalid segment_frames range"));
        }
        if !(self.max_turn.is_finite() && self.max_turn >= 0.0) {
            return Err(Error::validation("max_turn must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dataset: Dataset,
    /// Stratum index per video, parallel to `dataset.manifest.videos`.
    pub strata: Vec<usize>,
    pub config: WorldConfig,
}

impl World {
    pub fn num_strata(&self) -> usize {
        self.config.strata.len()
    }

    pub fn stratum_name(&self, video: usize) -> &str {
        &self.config.strata[self.strata[video]].name
    }
}

/// Largest-remainder apportionment of `total` into `weights.len()` parts,
/// ties by lower index.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (i, w) in weights.iter().enumerate() {
        let share = total as f64 * w / sum;
        let floor = share.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((share - floor as f64, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

struct Track {
    class_id: usize,
    birth: usize,
    /// Min-corner position per alive frame, on the 1/64 grid.
    positions: Vec<(f64, f64)>,
    w: f64,
    h: f64,
}

impl Track {
    fn bbox(&self, frame: usize) -> BBox {
        let (x, y) = self.positions[frame - self.birth];
        BBox::new(x, y, x + self.w, y + self.h).expect("grid box is valid")
    }

    fn alive(&self, frame: usize) -> bool {
        frame >= self.birth && frame < self.birth + self.positions.len()
    }
}

fn weighted_class(classes: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = classes.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen::<f64>() * total;
    for &(c, w) in classes {
        draw -= w;
        if draw < 0.0 {
            return c;
        }
    }
    classes.last().unwrap().0
}

fn snapped_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    snap64(rng.gen_range(lo..=hi)).clamp(lo, hi)
}

fn spawn_track(
    stratum: &StratumConfig,
    config: &WorldConfig,
    num_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Track {
    let class_id = weighted_class(&stratum.classes, rng);
    let w = snapped_uniform(rng, snap64(config.size_range.0), snap64(config.size_range.1));
    let h = snapped_uniform(rng, snap64(config.size_range.0), snap64(config.size_range.1));
    let life = rng
        .gen_range(config.min_lifetime..=config.max_lifetime)
        .min(num_frames);
    let birth = rng.gen_range(0..=num_frames - life);
    let max_x = f64::from(config.width) - w;
    let max_y = f64::from(config.height) - h;
    let mut x = snapped_uniform(rng, 0.0, max_x);
    let mut y = snapped_uniform(rng, 0.0, max_y);
    let speed = rng.gen_range(config.speed_range.0..=config.speed_range.1);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut vx = snap64(speed * theta.cos());
    let mut vy = snap64(speed * theta.sin());
    let mut seg_left = rng.gen_range(config.segment_frames.0..=config.segment_frames.1);

    let mut positions = Vec::with_capacity(life);
    positions.push((x, y));
    for _ in 1..life {
        if seg_left == 0 {
            let dtheta = rng.gen_range(-config.max_turn..=config.max_turn);
            let (sin, cos) = dtheta.sin_cos();
            let (nvx, nvy) = (vx * cos - vy * sin, vx * sin + vy * cos);
            vx = snap64(nvx);
            vy = snap64(nvy);
            seg_left = rng.gen_range(config.segment_frames.0..=config.segment_frames.1);
        }
        seg_left -= 1;
        x += vx;
        y += vy;
        // Reflect off the image border; 2m - x keeps the grid. The clamp only
        // matters for degenerate configs where one step spans the image.
        for _ in 0..2 {
            if x < 0.0 {
                x = -x;
                vx = -vx;
            }
            if x > max_x {
                x = 2.0 * max_x - x;
                vx = -vx;
            }
            if y < 0.0 {
                y = -y;
                vy = -vy;
            }
            if y > max_y {
                y = 2.0 * max_y - y;
                vy = -vy;
            }
        }
        x = x.clamp(0.0, max_x);
        y = y.clamp(0.0, max_y);
        positions.push((x, y));
    }
    Track { class_id, birth, positions, w, h }
}

/// Write `value` into every cell the box overlaps.
fn paint(grid: &mut [(f64, f64)], cols: usize, rows: usize, cell: f64, b: &BBox, value: (f64, f64)) {
    let col_lo = ((b.x_min / cell).floor().max(0.0)) as usize;
    let col_hi = (((b.x_max / cell).ceil()) as usize).min(cols);
    let row_lo = ((b.y_min / cell).floor().max(0.0)) as usize;
    let row_hi = (((b.y_max / cell).ceil()) as usize).min(rows);
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            grid[row * cols + col] = value;
        }
    }
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = substream(seed, &[TAG_WORLD]);

    // Strata get contiguous video blocks sized by largest-remainder
    // apportionment of their weights.
    let weights: Vec<f64> = config.strata.iter().map(|s| s.weight).collect();
    let counts = apportion(config.num_videos, &weights);
    let mut strata = Vec::with_capacity(config.num_videos);
    for (idx, count) in counts.iter().enumerate() {
        strata.extend(std::iter::repeat(idx).take(*count));
    }

    let mut metas = Vec::with_capacity(config.num_videos);
    let mut videos = Vec::with_capacity(config.num_videos);
    for (vi, &stratum_idx) in strata.iter().enumerate() {
        let stratum = &config.strata[stratum_idx];
        let num_frames = rng.gen_range(config.frames_per_video.0..=config.frames_per_video.1);
        let count = rng.gen_range(stratum.objects_per_video.0..=stratum.objects_per_video.1);
        let tracks: Vec<Track> = (0..count)
            .map(|_| spawn_track(stratum, config, num_frames, &mut rng))
            .collect();

        let ground_truth: Vec<Vec<GroundTruthObject>> = (0..num_frames)
            .map(|f| {
                tracks
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.alive(f))
                    .map(|(id, t)| GroundTruthObject {
                        track_id: id as u32,
                        class_id: t.class_id,
                        bbox: t.bbox(f),
                    })
                    .collect()
            })
            .collect();

        let cell = f64::from(config.cell_size);
        let motion: Vec<MotionField> = (0..num_frames.saturating_sub(1))
            .map(|f| {
                let mut field =
                    MotionField::zero(f, config.cell_size, config.width, config.height);
                let (cols, rows) = (field.cols, field.rows);
                let mut backward = vec![(0.0, 0.0); cols * rows];
                // Track order fixes who wins where boxes overlap; the error
                // there is bounded by the relative speed, far below one cell.
                for t in &tracks {
                    if !(t.alive(f) && t.alive(f + 1)) {
                        continue;
                    }
                    let (x0, y0) = t.positions[f - t.birth];
                    let (x1, y1) = t.positions[f + 1 - t.birth];
                    let d = (x1 - x0, y1 - y0);
                    paint(&mut field.forward, cols, rows, cell, &t.bbox(f), d);
                    paint(&mut backward, cols, rows, cell, &t.bbox(f + 1), (-d.0, -d.1));
                }
                field.backward = Some(backward);
                field
            })
            .collect();

        metas.push(VideoMeta {
            id: format!("v{vi:03}"),
            num_frames,
            width: config.width,
            height: config.height,
            fps: config.fps,
        });
        videos.push(VideoData {
            ground_truth,
            detections: vec![Vec::new(); num_frames],
            motion,
        });
    }

    let dataset = Dataset::new(
        DatasetManifest {
            name: "synthetic".to_string(),
            classes: config.classes.clone(),
            videos: metas,
        },
        videos,
    )?;
    Ok(World { dataset, strata, config: config.clone() })
}
