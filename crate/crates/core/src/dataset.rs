//! Dataset model and on-disk layout.
//!
//! A dataset directory holds `dataset.json` (manifest) plus per-video JSONL
//! files under `gt/`, `det/` and `motion/`. Every real number is written as
//! decimal text with six fractional digits; values produced by this crate are
//! quantized to that grid first (see [`quantize6`]), so a save/load cycle
//! reproduces the file bytes exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Tolerance for a detection's class scores summing to one.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

/// Snap to the 1e-6 grid used by the serialized text format. Normalizes
/// negative zero so the formatted text has a single representation.
pub fn quantize6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6 + 0.0
}

pub(crate) fn fmt6(x: f64) -> String {
    format!("{:.6}", x)
}

pub(crate) fn fmt_box(b: &BBox) -> String {
    format!(
        "[{},{},{},{}]",
        fmt6(b.x_min),
        fmt6(b.y_min),
        fmt6(b.x_max),
        fmt6(b.y_max)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub id: String,
    pub num_frames: usize,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Foreground class names; detection score vectors carry one extra
    /// trailing entry for background.
    pub classes: Vec<String>,
    pub videos: Vec<VideoMeta>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::validation("manifest has no classes"));
        }
        let unique: BTreeSet<&str> = self.classes.iter().map(|c| c.as_str()).collect();
        if unique.len() != self.classes.len() {
            return Err(Error::validation("manifest has duplicate class names"));
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if v.id.is_empty() || !ids.insert(v.id.as_str()) {
                return Err(Error::validation(format!(
                    "video id {:?} is empty or duplicated",
                    v.id
                )));
            }
            if v.num_frames == 0 || v.width == 0 || v.height == 0 {
                return Err(Error::validation(format!(
                    "video {:?} has empty dimensions or no frames",
                    v.id
                )));
            }
            if !(v.fps.is_finite() && v.fps > 0.0) {
                return Err(Error::validation(format!(
                    "video {:?} has invalid fps {}",
                    v.id, v.fps
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthObject {
    pub track_id: u32,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One detector output. `class_id` is the most probable foreground class,
/// `score` its probability; both derive from `scores`, which holds one
/// probability per foreground class plus background last and sums to one
/// within [`SCORE_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub scores: Vec<f64>,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, scores: Vec<f64>, num_classes: usize) -> Result<Self> {
        if scores.len() != num_classes + 1 {
            return Err(Error::validation(format!(
                "detection has {} scores, expected {} (classes + background)",
                scores.len(),
                num_classes + 1
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0 || *s > 1.0) {
            return Err(Error::validation(
                "detection scores must be finite and in [0, 1]".to_string(),
            ));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "detection scores sum to {sum}, expected 1 within {SCORE_SUM_TOLERANCE}"
            )));
        }
        let class_id = (0..num_classes)
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .map(|i| {
                // Ties go to the lowest class index.
                (0..num_classes)
                    .find(|&j| scores[j] == scores[i])
                    .unwrap_or(i)
            })
            .ok_or_else(|| Error::validation("detection needs at least one foreground class"))?;
        let score = scores[class_id];
        Ok(Detection {
            bbox,
            scores,
            class_id,
            score,
        })
    }
}

/// Dense motion grid mapping frame `frame` to `frame + 1`. Cells are
/// `cell_size` pixels square, row-major, `cols * rows` entries covering the
/// image; `backward` (frame + 1 to frame) is optional and approximated by the
/// negated forward vector when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub frame: usize,
    pub cell_size: u32,
    pub cols: usize,
    pub rows: usize,
    pub forward: Vec<(f64, f64)>,
    pub backward: Option<Vec<(f64, f64)>>,
}

impl MotionField {
    pub fn zero(frame: usize, cell_size: u32, width: u32, height: u32) -> Self {
        let cols = width.div_ceil(cell_size) as usize;
        let rows = height.div_ceil(cell_size) as usize;
        MotionField {
            frame,
            cell_size,
            cols,
            rows,
            forward: vec![(0.0, 0.0); cols * rows],
            backward: None,
        }
    }

    /// Row-major cell index for a pixel position, clamped to the grid.
    pub fn cell_index(&self, x: f64, y: f64) -> usize {
        let col = ((x / self.cell_size as f64).floor() as i64).clamp(0, self.cols as i64 - 1);
        let row = ((y / self.cell_size as f64).floor() as i64).clamp(0, self.rows as i64 - 1);
        row as usize * self.cols + col as usize
    }

    pub fn forward_at(&self, x: f64, y: f64) -> (f64, f64) {
        self.forward[self.cell_index(x, y)]
    }

    pub fn backward_at(&self, x: f64, y: f64) -> (f64, f64) {
        match &self.backward {
            Some(bwd) => bwd[self.cell_index(x, y)],
            None => {
                let (dx, dy) = self.forward_at(x, y);
                (-dx, -dy)
            }
        }
    }
}

/// Per-frame content of one video; `ground_truth` and `detections` have one
/// entry per frame, `motion` has `num_frames - 1` fields (or none at all).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoData {
    pub ground_truth: Vec<Vec<GroundTruthObject>>,
    pub detections: Vec<Vec<Detection>>,
    pub motion: Vec<MotionField>,
}

impl VideoData {
    pub fn empty(num_frames: usize) -> Self {
        VideoData {
            ground_truth: vec![Vec::new(); num_frames],
            detections: vec![Vec::new(); num_frames],
            motion: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Parallel to `manifest.videos`.
    pub videos: Vec<VideoData>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, videos: Vec<VideoData>) -> Result<Self> {
        let ds = Dataset { manifest, videos };
        ds.validate()?;
        Ok(ds)
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.manifest.videos.iter().position(|v| v.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.videos.len() != self.manifest.videos.len() {
            return Err(Error::validation(format!(
                "manifest lists {} videos, data holds {}",
                self.manifest.videos.len(),
                self.videos.len()
            )));
        }
        let num_classes = self.manifest.num_classes();
        for (meta, data) in self.manifest.videos.iter().zip(&self.videos) {
            let l = meta.num_frames;
            if data.ground_truth.len() != l || data.detections.len() != l {
                return Err(Error::validation(format!(
                    "video {:?}: per-frame lists do not match num_frames {l}",
                    meta.id
                )));
            }
            if !(data.motion.is_empty() || data.motion.len() + 1 == l) {
                return Err(Error::validation(format!(
                    "video {:?}: {} motion fields for {l} frames (want {} or none)",
                    meta.id,
                    data.motion.len(),
                    l - 1
                )));
            }
            for (frame, objects) in data.ground_truth.iter().enumerate() {
                let mut tracks = BTreeSet::new();
                for obj in objects {
                    if obj.class_id >= num_classes {
                        return Err(Error::validation(format!(
                            "video {:?} frame {frame}: class {} out of range",
                            meta.id, obj.class_id
                        )));
                    }
                    if !tracks.insert(obj.track_id) {
                        return Err(Error::validation(format!(
                            "video {:?} frame {frame}: track {} appears twice",
                            meta.id, obj.track_id
                        )));
                    }
                }
            }
            for (frame, dets) in data.detections.iter().enumerate() {
                for det in dets {
                    if det.scores.len() != num_classes + 1 {
                        return Err(Error::validation(format!(
                            "video {:?} frame {frame}: detection score vector length {}",
                            meta.id,
                            det.scores.len()
                        )));
                    }
                }
            }
            for (i, field) in data.motion.iter().enumerate() {
                let cols = meta.width.div_ceil(field.cell_size) as usize;
                let rows = meta.height.div_ceil(field.cell_size) as usize;
                if field.frame != i {
                    return Err(Error::validation(format!(
                        "video {:?}: motion field {i} labeled frame {}",
                        meta.id, field.frame
                    )));
                }
                if field.cols != cols || field.rows != rows
                    || field.forward.len() != cols * rows
                    || field.backward.as_ref().is_some_and(|b| b.len() != cols * rows)
                {
                    return Err(Error::validation(format!(
                        "video {:?}: motion grid for frame {i} does not cover a {}x{} image at cell {}",
                        meta.id, meta.width, meta.height, field.cell_size
                    )));
                }
            }
        }
        Ok(())
    }
}

// Wire rows for the JSONL files.

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRow {
    frame: usize,
    objects: Vec<GroundTruthObject>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetEntry {
    #[serde(rename = "box")]
    bbox: BBox,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetRow {
    frame: usize,
    detections: Vec<DetEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionRow {
    frame: usize,
    cell: u32,
    fwd: Vec<[f64; 2]>,
    #[serde(default)]
    bwd: Option<Vec<[f64; 2]>>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parse a JSONL file into per-frame rows; duplicate frames and frames past
/// `num_frames` are rejected. Returns an empty map when the file is absent.
fn read_rows<T: DeserializeOwned>(
    path: &Path,
    num_frames: usize,
    frame_of: impl Fn(&T) -> usize,
) -> Result<BTreeMap<usize, (usize, T)>> {
    let mut rows = BTreeMap::new();
    if !path.exists() {
        return Ok(rows);
    }
    let reader = BufReader::new(fs::File::open(path).map_err(|e| Error::io_at(path, e))?);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, line_no, e.to_string()))?;
        let frame = frame_of(&row);
        if frame >= num_frames {
            return Err(parse_err(
                path,
                line_no,
                format!("frame {frame} out of range (video has {num_frames} frames)"),
            ));
        }
        if rows.insert(frame, (line_no, row)).is_some() {
            return Err(parse_err(path, line_no, format!("duplicate frame {frame}")));
        }
    }
    Ok(rows)
}

/// Parse one per-video detection file; an absent file means no detections.
fn load_det_file(path: &Path, num_frames: usize, num_classes: usize) -> Result<Vec<Vec<Detection>>> {
    let mut frames = vec![Vec::new(); num_frames];
    for (frame, (line_no, row)) in read_rows::<DetRow>(path, num_frames, |r| r.frame)? {
        let mut dets = Vec::with_capacity(row.detections.len());
        for entry in row.detections {
            let det = Detection::new(entry.bbox, entry.scores, num_classes)
                .map_err(|e| parse_err(path, line_no, format!("frame {frame}: {e}")))?;
            dets.push(det);
        }
        frames[frame] = dets;
    }
    Ok(frames)
}

/// Load per-video detection files (`<video_id>.jsonl`) from a bare directory,
/// e.g. an external detector dump replacing the dataset's own `det/`. Every
/// video in the manifest must have its file. Returns per-video frame lists in
/// manifest order.
pub fn load_detections_dir(
    dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<Vec<Vec<Detection>>>> {
    manifest
        .videos
        .iter()
        .map(|meta| {
            let path = dir.join(format!("{}.jsonl", meta.id));
            if !path.exists() {
                return Err(Error::validation(format!(
                    "no detection file for video {:?} in {}",
                    meta.id,
                    dir.display()
                )));
            }
            load_det_file(&path, meta.num_frames, manifest.num_classes())
        })
        .collect()
}

fn load_video(root: &Path, meta: &VideoMeta, num_classes: usize) -> Result<VideoData> {
    let l = meta.num_frames;
    let mut data = VideoData::empty(l);

    let gt_path = root.join("gt").join(format!("{}.jsonl", meta.id));
    for (frame, (line_no, row)) in read_rows::<GtRow>(&gt_path, l, |r| r.frame)? {
        let mut objects = Vec::with_capacity(row.objects.len());
        for obj in row.objects {
            if obj.class_id >= num_classes {
                return Err(parse_err(
                    &gt_path,
                    line_no,
                    format!("class {} out of range", obj.class_id),
                ));
            }
            // Ground truth must stay within the image; clamp and reject boxes
            // that leave nothing behind.
            let bbox = obj
                .bbox
                .clamp_to_image(meta.width as f64, meta.height as f64)
                .map_err(|e| parse_err(&gt_path, line_no, e.to_string()))?;
            objects.push(GroundTruthObject { bbox, ..obj });
        }
        data.ground_truth[frame] = objects;
    }

    let det_path = root.join("det").join(format!("{}.jsonl", meta.id));
    data.detections = load_det_file(&det_path, l, num_classes)?;

    let motion_path = root.join("motion").join(format!("{}.jsonl", meta.id));
    if motion_path.exists() && l > 1 {
        let rows = read_rows::<MotionRow>(&motion_path, l - 1, |r| r.frame)?;
        for pair in 0..l - 1 {
            if !rows.contains_key(&pair) {
                return Err(parse_err(
                    &motion_path,
                    0,
                    format!("missing motion for frame pair {pair} -> {}", pair + 1),
                ));
            }
        }
        for (frame, (line_no, row)) in rows {
            if row.cell == 0 {
                return Err(parse_err(&motion_path, line_no, "cell size must be positive"));
            }
            let cols = meta.width.div_ceil(row.cell) as usize;
            let rows_n = meta.height.div_ceil(row.cell) as usize;
            let expect = cols * rows_n;
            if row.fwd.len() != expect
                || row.bwd.as_ref().is_some_and(|b| b.len() != expect)
            {
                return Err(parse_err(
                    &motion_path,
                    line_no,
                    format!(
                        "grid has {} cells, expected {expect} ({cols}x{rows_n} at cell {})",
                        row.fwd.len(),
                        row.cell
                    ),
                ));
            }
            let finite = |v: &[[f64; 2]]| v.iter().all(|d| d[0].is_finite() && d[1].is_finite());
            if !finite(&row.fwd) || row.bwd.as_ref().is_some_and(|b| !finite(b)) {
                return Err(parse_err(&motion_path, line_no, "non-finite motion vector"));
            }
            data.motion.push(MotionField {
                frame,
                cell_size: row.cell,
                cols,
                rows: rows_n,
                forward: row.fwd.iter().map(|d| (d[0], d[1])).collect(),
                backward: row
                    .bwd
                    .map(|b| b.iter().map(|d| (d[0], d[1])).collect()),
            });
        }
    }

    Ok(data)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("dataset.json");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io_at(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| parse_err(&manifest_path, e.line(), e.to_string()))?;
    manifest.validate()?;

    let num_classes = manifest.num_classes();
    let videos = manifest
        .videos
        .iter()
        .map(|meta| load_video(root, meta, num_classes))
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(manifest, videos)
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(root.join("gt"))?;
    fs::create_dir_all(root.join("det"))?;
    if dataset.videos.iter().any(|v| !v.motion.is_empty()) {
        fs::create_dir_all(root.join("motion"))?;
    }

    let mut manifest_text = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::validation(e.to_string()))?;
    manifest_text.push('\n');
    fs::write(root.join("dataset.json"), manifest_text)?;

    for (meta, data) in dataset.manifest.videos.iter().zip(&dataset.videos) {
        let mut gt = BufWriter::new(fs::File::create(
            root.join("gt").join(format!("{}.jsonl", meta.id)),
        )?);
        for (frame, objects) in data.ground_truth.iter().enumerate() {
            let entries: Vec<String> = objects
                .iter()
                .map(|o| {
                    format!(
                        r#"{{"track_id":{},"class":{},"box":{}}}"#,
                        o.track_id,
                        o.class_id,
                        fmt_box(&o.bbox)
                    )
                })
                .collect();
            writeln!(gt, r#"{{"frame":{},"objects":[{}]}}"#, frame, entries.join(","))?;
        }
        gt.flush()?;

        let mut det = BufWriter::new(fs::File::create(
            root.join("det").join(format!("{}.jsonl", meta.id)),
        )?);
        for (frame, dets) in data.detections.iter().enumerate() {
            let entries: Vec<String> = dets
                .iter()
                .map(|d| {
                    let scores: Vec<String> = d.scores.iter().map(|s| fmt6(*s)).collect();
                    format!(
                        r#"{{"box":{},"scores":[{}]}}"#,
                        fmt_box(&d.bbox),
                        scores.join(",")
                    )
                })
                .collect();
            writeln!(
                det,
                r#"{{"frame":{},"detections":[{}]}}"#,
                frame,
                entries.join(",")
            )?;
        }
        det.flush()?;

        if !data.motion.is_empty() {
            let mut mo = BufWriter::new(fs::File::create(
                root.join("motion").join(format!("{}.jsonl", meta.id)),
            )?);
            for field in &data.motion {
                let fwd: Vec<String> = field
                    .forward
                    .iter()
                    .map(|(dx, dy)| format!("[{},{}]", fmt6(*dx), fmt6(*dy)))
                    .collect();
                let bwd = match &field.backward {
                    Some(b) => {
                        let cells: Vec<String> = b
                            .iter()
                            .map(|(dx, dy)| format!("[{},{}]", fmt6(*dx), fmt6(*dy)))
                            .collect();
                        format!(r#","bwd":[{}]"#, cells.join(","))
                    }
                    None => String::new(),
                };
                writeln!(
                    mo,
                    r#"{{"frame":{},"cell":{},"fwd":[{}]{}}}"#,
                    field.frame,
                    field.cell_size,
                    fwd.join(","),
                    bwd
                )?;
            }
            mo.flush()?;
        }
    }
    Ok(())
}

/// Frames per video, keyed by video id. Used for labeled sets and selection.
pub type FrameMap = BTreeMap<String, BTreeSet<usize>>;

/// Read a `{video_id: [frame, ...]}` JSON document.
pub fn load_frame_map(path: &Path) -> Result<FrameMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let map: FrameMap = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok(map)
}

pub fn save_frame_map(map: &FrameMap, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(map).map_err(|e| Error::validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
