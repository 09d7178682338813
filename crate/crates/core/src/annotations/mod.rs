//! Annotation ingest and the fixed 512×512 quantized canvas.
//!
//! Raw annotations arrive in original image pixels. Every image is resized
//! so that its long side is 512 pixels, centered by padding the short side,
//! and every coordinate is rounded onto the integer grid `0..=512`.

mod coco;
mod polar;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coco::{load_annotations, IngestReport, LoadedAnnotations};
pub use polar::polar_sample_mask;

/// Side length of the quantized canvas, which is also the largest coordinate value.
pub const CANVAS_MAX: u32 = 512;

/// Default number of polar boundary samples per instance mask.
pub const DEFAULT_MASK_POINTS: usize = 36;

/// Instances whose visible keypoint count falls below this are not ingested.
pub const MIN_VISIBLE_KEYPOINTS: usize = 5;

const SMALL_AREA: f64 = 32.0 * 32.0;
const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("malformed annotation file: {0}")]
    MalformedFile(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("no usable images in dataset")]
    EmptyDataset,
    #[error("scene has no instances")]
    EmptyScene,
    #[error("degenerate polygon (zero area)")]
    DegeneratePolygon,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Box,
    Keypoint,
    Mask,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 3] = [
        AnnotationKind::Box,
        AnnotationKind::Keypoint,
        AnnotationKind::Mask,
    ];

    /// The flag word used in serialized sequences.
    pub fn word(self) -> &'static str {
        match self {
            AnnotationKind::Box => "box",
            AnnotationKind::Keypoint => "key point",
            AnnotationKind::Mask => "mask",
        }
    }

    /// Accepts the canonical flag word plus the single-word `keypoint` spelling.
    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "box" => Some(AnnotationKind::Box),
            "key point" | "keypoint" => Some(AnnotationKind::Keypoint),
            "mask" => Some(AnnotationKind::Mask),
            _ => None,
        }
    }
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataType {
    ObjectCentric,
    MultipleInstances,
}

impl DataType {
    pub const ALL: [DataType; 2] = [DataType::ObjectCentric, DataType::MultipleInstances];

    pub fn word(self) -> &'static str {
        match self {
            DataType::ObjectCentric => "object centric",
            DataType::MultipleInstances => "multiple instances",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "object centric" => Some(DataType::ObjectCentric),
            "multiple instances" => Some(DataType::MultipleInstances),
            _ => None,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeFlag {
    Small,
    Medium,
    Large,
}

impl SizeFlag {
    pub const ALL: [SizeFlag; 3] = [SizeFlag::Small, SizeFlag::Medium, SizeFlag::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeFlag::Small => "small",
            SizeFlag::Medium => "medium",
            SizeFlag::Large => "large",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "small" => Some(SizeFlag::Small),
            "medium" => Some(SizeFlag::Medium),
            "large" => Some(SizeFlag::Large),
            _ => None,
        }
    }

    /// Piecewise rule on the average instance area: `< 32²`, `< 96²`, otherwise large.
    pub fn from_average_area(area: f64) -> Self {
        if area < SMALL_AREA {
            SizeFlag::Small
        } else if area < LARGE_AREA {
            SizeFlag::Medium
        } else {
            SizeFlag::Large
        }
    }
}

impl fmt::Display for SizeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// A point on the quantized canvas. `(0, 0)` doubles as the "not visible" keypoint marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const HIDDEN: Point = Point { x: 0, y: 0 };

    pub fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }

    pub fn is_hidden(self) -> bool {
        self == Point::HIDDEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantGeometry {
    Box {
        xmin: u32,
        ymin: u32,
        xmax: u32,
        ymax: u32,
    },
    Keypoints(Vec<Point>),
    Mask(Vec<Point>),
}

impl QuantGeometry {
    pub fn kind(&self) -> AnnotationKind {
        match self {
            QuantGeometry::Box { .. } => AnnotationKind::Box,
            QuantGeometry::Keypoints(_) => AnnotationKind::Keypoint,
            QuantGeometry::Mask(_) => AnnotationKind::Mask,
        }
    }

    /// Tight bounding box `(xmin, ymin, xmax, ymax)`.
    ///
    /// Keypoints only count visible joints; a geometry with nothing to bound
    /// yields `None`. Inverted boxes (as a sampler may emit) are returned as-is.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let points: Box<dyn Iterator<Item = Point> + '_> = match self {
            QuantGeometry::Box {
                xmin,
                ymin,
                xmax,
                ymax,
            } => return Some((*xmin, *ymin, *xmax, *ymax)),
            QuantGeometry::Keypoints(points) => {
                Box::new(points.iter().copied().filter(|p| !p.is_hidden()))
            }
            QuantGeometry::Mask(points) => Box::new(points.iter().copied()),
        };
        points.fold(None, |acc, p| match acc {
            None => Some((p.x, p.y, p.x, p.y)),
            Some((x0, y0, x1, y1)) => Some((x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y))),
        })
    }

    /// Area of the tight bounding box; zero for inverted or empty geometry.
    pub fn area(&self) -> u64 {
        match self.bounding_box() {
            Some((x0, y0, x1, y1)) => {
                u64::from(x1.saturating_sub(x0)) * u64::from(y1.saturating_sub(y0))
            }
            None => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneInstance {
    pub category: String,
    pub geometry: QuantGeometry,
}

/// One image's annotations on the quantized canvas, plus its scene-level flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneRecord {
    pub annotation_type: AnnotationKind,
    pub data_type: DataType,
    pub size_flag: SizeFlag,
    /// 0 for boxes and masks, 14 or 18 for keypoints.
    pub n_keypoints: u32,
    pub instances: Vec<SceneInstance>,
}

impl SceneRecord {
    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    /// Checks the structural invariants a well-formed record must satisfy.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.instances.is_empty() {
            return Err(AnnotationError::EmptyScene);
        }
        let bad = |msg: String| Err(AnnotationError::InvalidInput(msg));
        let expected_kp = match self.annotation_type {
            AnnotationKind::Keypoint => {
                if self.n_keypoints != 14 && self.n_keypoints != 18 {
                    return bad(format!(
                        "keypoint scene declares {} keypoints",
                        self.n_keypoints
                    ));
                }
                self.n_keypoints as usize
            }
            _ => {
                if self.n_keypoints != 0 {
                    return bad("non-keypoint scene with nonzero keypoint count".into());
                }
                0
            }
        };
        for inst in &self.instances {
            if inst.geometry.kind() != self.annotation_type {
                return bad(format!(
                    "{} instance in a {} scene",
                    inst.geometry.kind(),
                    self.annotation_type
                ));
            }
            let in_range = |p: &Point| p.x <= CANVAS_MAX && p.y <= CANVAS_MAX;
            match &inst.geometry {
                QuantGeometry::Box {
                    xmin,
                    ymin,
                    xmax,
                    ymax,
                } => {
                    if [*xmin, *ymin, *xmax, *ymax].iter().any(|c| *c > CANVAS_MAX) {
                        return bad("box coordinate outside canvas".into());
                    }
                }
                QuantGeometry::Keypoints(points) => {
                    if points.len() != expected_kp || !points.iter().all(in_range) {
                        return bad("keypoint group malformed".into());
                    }
                }
                QuantGeometry::Mask(points) => {
                    if points.len() < 3 || !points.iter().all(in_range) {
                        return bad("mask group malformed".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Geometry in original image pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum RawGeometry {
    Box {
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
    Keypoints(Vec<RawKeypoint>),
    MaskPolygon(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawKeypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub category: String,
    pub geometry: RawGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawImageAnnotation {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<RawInstance>,
}

/// Resize-long-side-to-512 plus centered padding of the short side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanvasTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl CanvasTransform {
    /// Maps one original-pixel coordinate onto the integer canvas grid.
    pub fn map_x(&self, x: f64) -> u32 {
        quantize(x * self.scale + self.pad_x)
    }

    pub fn map_y(&self, y: f64) -> u32 {
        quantize(y * self.scale + self.pad_y)
    }
}

/// `clamp(round(v), 0, 512)` with ties rounded away from zero.
pub fn quantize(v: f64) -> u32 {
    if !v.is_finite() {
        return 0;
    }
    v.round().clamp(0.0, f64::from(CANVAS_MAX)) as u32
}

pub fn compute_transform(width: u32, height: u32) -> CanvasTransform {
    debug_assert!(width > 0 && height > 0);
    let long = width.max(height) as f64;
    let scale = f64::from(CANVAS_MAX) / long;
    let short_pad = |short: u32| -> f64 {
        let scaled = (f64::from(short) * scale).round();
        ((f64::from(CANVAS_MAX) - scaled) / 2.0).floor()
    };
    let (pad_x, pad_y) = if width >= height {
        (0.0, short_pad(height))
    } else {
        (short_pad(width), 0.0)
    };
    CanvasTransform {
        scale,
        pad_x,
        pad_y,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub data_type: DataType,
    pub mask_points: usize,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions {
            data_type: DataType::MultipleInstances,
            mask_points: DEFAULT_MASK_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedScene {
    pub record: SceneRecord,
    /// Instances removed because their geometry collapsed on the canvas.
    pub dropped: usize,
}

/// Maps a raw image annotation onto the canvas.
///
/// Instances whose geometry collapses to zero area are dropped and counted.
/// Fails with [`AnnotationError::EmptyScene`] when nothing survives, and with
/// [`AnnotationError::InvalidInput`] when the image mixes annotation kinds.
pub fn quantize_scene(
    raw: &RawImageAnnotation,
    opts: &QuantizeOptions,
) -> Result<QuantizedScene, AnnotationError> {
    if raw.width == 0 || raw.height == 0 {
        return Err(AnnotationError::InvalidInput(format!(
            "image {} has zero dimension",
            raw.image_id
        )));
    }
    let first = raw.instances.first().ok_or(AnnotationError::EmptyScene)?;
    let kind = raw_kind(&first.geometry);
    let tf = compute_transform(raw.width, raw.height);
    let mut instances = Vec::with_capacity(raw.instances.len());
    let mut dropped = 0;
    let mut n_keypoints = 0u32;
    for inst in &raw.instances {
        if raw_kind(&inst.geometry) != kind {
            return Err(AnnotationError::InvalidInput(format!(
                "image {} mixes annotation kinds",
                raw.image_id
            )));
        }
        let geometry = match &inst.geometry {
            RawGeometry::Box {
                xmin,
                ymin,
                xmax,
                ymax,
            } => {
                let b = QuantGeometry::Box {
                    xmin: tf.map_x(*xmin),
                    ymin: tf.map_y(*ymin),
                    xmax: tf.map_x(*xmax),
                    ymax: tf.map_y(*ymax),
                };
                (b.area() > 0).then_some(b)
            }
            RawGeometry::Keypoints(kps) => {
                if kps.len() != 14 && kps.len() != 18 {
                    return Err(AnnotationError::InvalidInput(format!(
                        "keypoint list of length {}",
                        kps.len()
                    )));
                }
                if n_keypoints != 0 && n_keypoints as usize != kps.len() {
                    return Err(AnnotationError::InvalidInput(
                        "keypoint formats mixed within one image".into(),
                    ));
                }
                n_keypoints = kps.len() as u32;
                let points: Vec<Point> = kps
                    .iter()
                    .map(|k| {
                        if k.visible {
                            Point::new(tf.map_x(k.x), tf.map_y(k.y))
                        } else {
                            Point::HIDDEN
                        }
                    })
                    .collect();
                let g = QuantGeometry::Keypoints(points);
                (g.bounding_box().is_some()).then_some(g)
            }
            RawGeometry::MaskPolygon(vertices) => {
                let quantized: Vec<Point> = vertices
                    .iter()
                    .map(|(x, y)| Point::new(tf.map_x(*x), tf.map_y(*y)))
                    .collect();
                polar_sample_mask(&quantized, opts.mask_points)
                    .ok()
                    .map(QuantGeometry::Mask)
            }
        };
        match geometry {
            Some(geometry) => instances.push(SceneInstance {
                category: inst.category.clone(),
                geometry,
            }),
            None => dropped += 1,
        }
    }
    let size_flag = classify_size(&instances)?;
    Ok(QuantizedScene {
        record: SceneRecord {
            annotation_type: kind,
            data_type: opts.data_type,
            size_flag,
            n_keypoints,
            instances,
        },
        dropped,
    })
}

fn raw_kind(g: &RawGeometry) -> AnnotationKind {
    match g {
        RawGeometry::Box { .. } => AnnotationKind::Box,
        RawGeometry::Keypoints(_) => AnnotationKind::Keypoint,
        RawGeometry::MaskPolygon(_) => AnnotationKind::Mask,
    }
}

/// Average tight-bounding-box area of the instances.
pub fn average_area(instances: &[SceneInstance]) -> Option<f64> {
    if instances.is_empty() {
        return None;
    }
    let total: u64 = instances.iter().map(|i| i.geometry.area()).sum();
    Some(total as f64 / instances.len() as f64)
}

pub fn classify_size(instances: &[SceneInstance]) -> Result<SizeFlag, AnnotationError> {
    average_area(instances)
        .map(SizeFlag::from_average_area)
        .ok_or(AnnotationError::EmptyScene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(category: &str, xmin: u32, ymin: u32, xmax: u32, ymax: u32) -> SceneInstance {
        SceneInstance {
            category: category.into(),
            geometry: QuantGeometry::Box {
                xmin,
                ymin,
                xmax,
                ymax,
            },
        }
    }

    #[test]
    fn transform_landscape() {
        let t = compute_transform(1024, 768);
        assert_eq!(t.scale, 0.5);
        assert_eq!((t.pad_x, t.pad_y), (0.0, 64.0));
    }

    #[test]
    fn transform_square_is_identity() {
        let t = compute_transform(512, 512);
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 0.0));
    }

    #[test]
    fn transform_upscales_small_images() {
        let t = compute_transform(200, 100);
        assert!((t.scale - 2.56).abs() < 1e-12);
        assert_eq!((t.pad_x, t.pad_y), (0.0, 128.0));
        let portrait = compute_transform(100, 200);
        assert_eq!((portrait.pad_x, portrait.pad_y), (128.0, 0.0));
    }

    #[test]
    fn quantize_box_on_landscape_image() {
        let raw = RawImageAnnotation {
            image_id: 1,
            width: 1024,
            height: 768,
            instances: vec![RawInstance {
                category: "dog".into(),
                geometry: RawGeometry::Box {
                    xmin: 100.0,
                    ymin: 100.0,
                    xmax: 300.0,
                    ymax: 200.0,
                },
            }],
        };
        let q = quantize_scene(&raw, &QuantizeOptions::default()).unwrap();
        assert_eq!(q.dropped, 0);
        assert_eq!(
            q.record.instances[0].geometry,
            QuantGeometry::Box {
                xmin: 50,
                ymin: 114,
                xmax: 150,
                ymax: 164
            }
        );
        assert_eq!(q.record.size_flag, SizeFlag::Medium);
    }

    #[test]
    fn invisible_keypoints_become_origin() {
        let mut kps = vec![
            RawKeypoint {
                x: 256.0,
                y: 256.0,
                visible: true
            };
            14
        ];
        kps[3] = RawKeypoint {
            x: 40.0,
            y: 90.0,
            visible: false,
        };
        kps[0] = RawKeypoint {
            x: 300.0,
            y: 310.0,
            visible: true,
        };
        let raw = RawImageAnnotation {
            image_id: 2,
            width: 512,
            height: 512,
            instances: vec![RawInstance {
                category: "person".into(),
                geometry: RawGeometry::Keypoints(kps),
            }],
        };
        let q = quantize_scene(&raw, &QuantizeOptions::default()).unwrap();
        assert_eq!(q.record.n_keypoints, 14);
        let QuantGeometry::Keypoints(points) = &q.record.instances[0].geometry else {
            panic!("expected keypoints");
        };
        assert_eq!(points[3], Point::HIDDEN);
        assert_eq!(points[1], Point::new(256, 256));
    }

    #[test]
    fn zero_area_boxes_are_dropped() {
        let raw = RawImageAnnotation {
            image_id: 3,
            width: 4000,
            height: 4000,
            instances: vec![
                RawInstance {
                    category: "a".into(),
                    geometry: RawGeometry::Box {
                        xmin: 10.0,
                        ymin: 10.0,
                        xmax: 11.0,
                        ymax: 400.0,
                    },
                },
                RawInstance {
                    category: "b".into(),
                    geometry: RawGeometry::Box {
                        xmin: 0.0,
                        ymin: 0.0,
                        xmax: 4000.0,
                        ymax: 4000.0,
                    },
                },
            ],
        };
        let q = quantize_scene(&raw, &QuantizeOptions::default()).unwrap();
        assert_eq!(q.dropped, 1);
        assert_eq!(q.record.instances.len(), 1);
        assert_eq!(q.record.instances[0].category, "b");
    }

    #[test]
    fn size_boundaries() {
        // 1023 = 31 * 33, 1024 = 32 * 32, 9216 = 96 * 96
        assert_eq!(
            classify_size(&[boxed("a", 0, 0, 31, 33)]).unwrap(),
            SizeFlag::Small
        );
        assert_eq!(
            classify_size(&[boxed("a", 0, 0, 32, 32)]).unwrap(),
            SizeFlag::Medium
        );
        assert_eq!(
            classify_size(&[boxed("a", 0, 0, 96, 96)]).unwrap(),
            SizeFlag::Large
        );
        assert_eq!(classify_size(&[]), Err(AnnotationError::EmptyScene));
    }

    #[test]
    fn size_uses_the_average() {
        let flag = classify_size(&[boxed("a", 0, 0, 10, 10), boxed("b", 0, 0, 100, 100)]).unwrap();
        // (100 + 10000) / 2 = 5050
        assert_eq!(flag, SizeFlag::Medium);
    }

    #[test]
    fn keypoint_area_ignores_hidden_joints() {
        let mut pts = vec![Point::HIDDEN; 14];
        pts[0] = Point::new(10, 20);
        pts[5] = Point::new(50, 60);
        assert_eq!(QuantGeometry::Keypoints(pts).area(), 40 * 40);
    }

    #[test]
    fn size_rule_partitions_the_half_line() {
        let mut prev = SizeFlag::Small;
        for a in 0..20_000 {
            let f = SizeFlag::from_average_area(a as f64);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(SizeFlag::from_average_area(1e12), SizeFlag::Large);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(2.5), 3);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(600.0), 512);
        assert_eq!(quantize(f64::NAN), 0);
    }
}
