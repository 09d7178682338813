//! Reader for a documented subset of the COCO annotation format.
//!
//! Recognized fields:
//!
//! - `images[]`: `id`, `width`, `height`
//! - `annotations[]`: `image_id`, `category_id`, and one of `bbox` (`[x, y, w, h]`),
//!   `keypoints` (flat `x, y, v` triplets for 14, 17 or 18 joints) or
//!   `segmentation` (list of flat polygons; RLE objects are skipped)
//! - `categories[]`: `id`, `name`
//!
//! 17-joint COCO keypoints are converted to the 18-joint layout by reordering
//! and inserting a neck joint at the shoulder midpoint.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use super::{
    AnnotationError, AnnotationKind, RawGeometry, RawImageAnnotation, RawInstance, RawKeypoint,
    MIN_VISIBLE_KEYPOINTS,
};

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    keypoints: Option<Vec<f64>>,
    #[serde(default)]
    segmentation: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Kept/dropped bookkeeping for one ingest run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub images_total: usize,
    pub images_kept: usize,
    /// Images with no usable instance, excluded with a warning.
    pub images_empty: usize,
    pub instances_total: usize,
    pub instances_kept: usize,
    pub dropped_few_keypoints: usize,
    pub dropped_unsupported: usize,
    pub dropped_degenerate: usize,
}

impl IngestReport {
    pub fn instances_dropped(&self) -> usize {
        self.dropped_few_keypoints + self.dropped_unsupported + self.dropped_degenerate
    }

    pub fn merge(&mut self, other: &IngestReport) {
        self.images_total += other.images_total;
        self.images_kept += other.images_kept;
        self.images_empty += other.images_empty;
        self.instances_total += other.instances_total;
        self.instances_kept += other.instances_kept;
        self.dropped_few_keypoints += other.dropped_few_keypoints;
        self.dropped_unsupported += other.dropped_unsupported;
        self.dropped_degenerate += other.dropped_degenerate;
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images_total = {}", self.images_total)?;
        writeln!(f, "images_kept = {}", self.images_kept)?;
        writeln!(f, "images_empty = {}", self.images_empty)?;
        writeln!(f, "instances_total = {}", self.instances_total)?;
        writeln!(f, "instances_kept = {}", self.instances_kept)?;
        writeln!(f, "dropped_few_keypoints = {}", self.dropped_few_keypoints)?;
        writeln!(f, "dropped_unsupported = {}", self.dropped_unsupported)?;
        write!(f, "dropped_degenerate = {}", self.dropped_degenerate)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedAnnotations {
    pub images: Vec<RawImageAnnotation>,
    pub report: IngestReport,
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    kind: AnnotationKind,
) -> Result<LoadedAnnotations, AnnotationError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| AnnotationError::MalformedFile(format!("{}: {e}", path.display())))?;
    parse_annotations(&text, kind)
}

/// Same as [`load_annotations`] on an in-memory document.
pub fn parse_annotations(
    text: &str,
    kind: AnnotationKind,
) -> Result<LoadedAnnotations, AnnotationError> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => AnnotationError::SchemaViolation(e.to_string()),
        _ => AnnotationError::MalformedFile(e.to_string()),
    })?;

    let categories: HashMap<u64, &str> = file
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut report = IngestReport {
        images_total: file.images.len(),
        ..Default::default()
    };

    // BTreeMap keeps image order stable regardless of annotation order.
    let mut per_image: BTreeMap<u64, Vec<RawInstance>> = BTreeMap::new();
    let mut dims: HashMap<u64, (u32, u32)> = HashMap::new();
    for img in &file.images {
        if img.width == 0 || img.height == 0 {
            return Err(AnnotationError::SchemaViolation(format!(
                "image {} has zero width or height",
                img.id
            )));
        }
        dims.insert(img.id, (img.width, img.height));
    }

    for ann in &file.annotations {
        let &(width, height) = dims.get(&ann.image_id).ok_or_else(|| {
            AnnotationError::SchemaViolation(format!(
                "annotation references unknown image {}",
                ann.image_id
            ))
        })?;
        let category = categories.get(&ann.category_id).ok_or_else(|| {
            AnnotationError::SchemaViolation(format!("unknown category id {}", ann.category_id))
        })?;
        report.instances_total += 1;
        let (w, h) = (f64::from(width), f64::from(height));
        let geometry = match kind {
            AnnotationKind::Box => {
                let [x, y, bw, bh] = ann.bbox.ok_or_else(|| {
                    AnnotationError::SchemaViolation("box annotation without bbox".into())
                })?;
                Some(RawGeometry::Box {
                    xmin: x.clamp(0.0, w),
                    ymin: y.clamp(0.0, h),
                    xmax: (x + bw).clamp(0.0, w),
                    ymax: (y + bh).clamp(0.0, h),
                })
            }
            AnnotationKind::Keypoint => {
                let flat = ann.keypoints.as_ref().ok_or_else(|| {
                    AnnotationError::SchemaViolation("keypoint annotation without keypoints".into())
                })?;
                let joints = parse_keypoints(flat, w, h)?;
                let visible = joints.iter().filter(|k| k.visible).count();
                if visible < MIN_VISIBLE_KEYPOINTS {
                    report.dropped_few_keypoints += 1;
                    None
                } else {
                    Some(RawGeometry::Keypoints(to_canvas_layout(joints)))
                }
            }
            AnnotationKind::Mask => match ann.segmentation.as_ref().map(largest_polygon) {
                Some(Some(poly)) => Some(RawGeometry::MaskPolygon(
                    poly.into_iter()
                        .map(|(x, y)| (x.clamp(0.0, w), y.clamp(0.0, h)))
                        .collect(),
                )),
                _ => {
                    report.dropped_unsupported += 1;
                    None
                }
            },
        };
        if let Some(geometry) = geometry {
            if let RawGeometry::MaskPolygon(p) = &geometry {
                if polygon_area(p) == 0.0 {
                    report.dropped_degenerate += 1;
                    continue;
                }
            }
            per_image
                .entry(ann.image_id)
                .or_default()
                .push(RawInstance {
                    category: category.to_string(),
                    geometry,
                });
        }
    }

    let mut images = Vec::new();
    for img in &file.images {
        match per_image.remove(&img.id) {
            Some(instances) if !instances.is_empty() => {
                report.instances_kept += instances.len();
                images.push(RawImageAnnotation {
                    image_id: img.id,
                    width: img.width,
                    height: img.height,
                    instances,
                });
            }
            _ => report.images_empty += 1,
        }
    }
    report.images_kept = images.len();
    if images.is_empty() {
        return Err(AnnotationError::EmptyDataset);
    }
    Ok(LoadedAnnotations { images, report })
}

fn parse_keypoints(flat: &[f64], w: f64, h: f64) -> Result<Vec<RawKeypoint>, AnnotationError> {
    if flat.len() % 3 != 0 || !matches!(flat.len() / 3, 14 | 17 | 18) {
        return Err(AnnotationError::SchemaViolation(format!(
            "keypoint array of length {} (expected 14, 17 or 18 triplets)",
            flat.len()
        )));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|t| RawKeypoint {
            x: t[0].clamp(0.0, w),
            y: t[1].clamp(0.0, h),
            visible: t[2] > 0.0,
        })
        .collect())
}

/// COCO-17 joint index for each slot of the 18-joint layout; `None` marks the synthesized neck.
const COCO17_TO_18: [Option<usize>; 18] = [
    Some(0),
    None,
    Some(6),
    Some(8),
    Some(10),
    Some(5),
    Some(7),
    Some(9),
    Some(12),
    Some(14),
    Some(16),
    Some(11),
    Some(13),
    Some(15),
    Some(2),
    Some(1),
    Some(4),
    Some(3),
];

fn to_canvas_layout(joints: Vec<RawKeypoint>) -> Vec<RawKeypoint> {
    if joints.len() != 17 {
        return joints;
    }
    let hidden = RawKeypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };
    COCO17_TO_18
        .iter()
        .map(|slot| match slot {
            Some(i) => joints[*i],
            None => {
                let (l, r) = (joints[5], joints[6]);
                if l.visible && r.visible {
                    RawKeypoint {
                        x: (l.x + r.x) / 2.0,
                        y: (l.y + r.y) / 2.0,
                        visible: true,
                    }
                } else {
                    hidden
                }
            }
        })
        .collect()
}

/// Largest polygon (by vertex count) of a polygon-list segmentation; `None` for RLE.
fn largest_polygon(seg: &serde_json::Value) -> Option<Vec<(f64, f64)>> {
    let polys = seg.as_array()?;
    polys
        .iter()
        .filter_map(|p| {
            let coords: Option<Vec<f64>> = p.as_array()?.iter().map(|v| v.as_f64()).collect();
            let coords = coords?;
            (coords.len() >= 6 && coords.len() % 2 == 0).then(|| {
                coords
                    .chunks_exact(2)
                    .map(|c| (c[0], c[1]))
                    .collect::<Vec<_>>()
            })
        })
        .max_by_key(|p| p.len())
}

fn polygon_area(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}
