//! Deterministic SVG drawings of layouts and priors.

use std::fmt::Write as _;

use crate::annotations::{Point, QuantGeometry, SceneRecord, CANVAS_MAX};
use crate::evalsuite::{LocationPrior, ShapePrior};

/// Edges over an 18-joint body (nose, neck, right arm, left arm, right leg,
/// left leg, eyes, ears), joint `i` being letter `a + i`.
pub const SKELETON_18: [(u8, u8); 18] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (8, 11),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Edges over a 14-joint body: shoulders, elbows, wrists, hips, knees,
/// ankles, then head top and neck.
pub const SKELETON_14: [(u8, u8); 13] = [
    (12, 13),
    (13, 0),
    (0, 1),
    (1, 2),
    (13, 3),
    (3, 4),
    (4, 5),
    (0, 6),
    (6, 7),
    (7, 8),
    (3, 9),
    (9, 10),
    (10, 11),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    pub canvas: u32,
    pub stroke_width: f64,
    pub font_size: f64,
    pub joint_radius: f64,
    pub skeleton_18: Vec<(u8, u8)>,
    pub skeleton_14: Vec<(u8, u8)>,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            canvas: CANVAS_MAX,
            stroke_width: 2.0,
            font_size: 12.0,
            joint_radius: 3.0,
            skeleton_18: SKELETON_18.to_vec(),
            skeleton_14: SKELETON_14.to_vec(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Stable color for a category name.
pub fn category_color(name: &str) -> String {
    let h = fnv1a(name.as_bytes());
    format!("hsl({},70%,45%)", h % 360)
}

/// Hex digest used as the file stem of a rendered record.
pub fn record_hash(record: &SceneRecord) -> String {
    let json = serde_json::to_vec(record).expect("records serialize");
    format!("{:016x}", fnv1a(&json))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, w: u32, h: u32) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="black"/>"#
    );
}

pub fn render_svg(record: &SceneRecord, style: &RenderStyle) -> String {
    let c = style.canvas;
    let clamp = |v: u32| v.min(c);
    let mut out = String::new();
    header(&mut out, c, c);
    for inst in &record.instances {
        let color = category_color(&inst.category);
        let label = escape(&inst.category);
        match &inst.geometry {
            QuantGeometry::Box {
                xmin,
                ymin,
                xmax,
                ymax,
            } => {
                let (x0, x1) = (clamp(*xmin.min(xmax)), clamp(*xmin.max(xmax)));
                let (y0, y1) = (clamp(*ymin.min(ymax)), clamp(*ymin.max(ymax)));
                let _ = writeln!(
                    out,
                    r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="{}"/>"#,
                    x1 - x0,
                    y1 - y0,
                    style.stroke_width
                );
            }
            QuantGeometry::Keypoints(points) => {
                let edges: &[(u8, u8)] = if points.len() == 18 {
                    &style.skeleton_18
                } else {
                    &style.skeleton_14
                };
                for &(a, b) in edges {
                    let (Some(p), Some(q)) = (points.get(a as usize), points.get(b as usize))
                    else {
                        continue;
                    };
                    if p.is_hidden() || q.is_hidden() {
                        continue;
                    }
                    let _ = writeln!(
                        out,
                        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="{}"/>"#,
                        clamp(p.x),
                        clamp(p.y),
                        clamp(q.x),
                        clamp(q.y),
                        style.stroke_width
                    );
                }
                for p in points.iter().filter(|p| !p.is_hidden()) {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{}" cy="{}" r="{}" fill="{color}"/>"#,
                        clamp(p.x),
                        clamp(p.y),
                        style.joint_radius
                    );
                }
            }
            QuantGeometry::Mask(points) => {
                let pts: Vec<String> = points
                    .iter()
                    .map(|p: &Point| format!("{},{}", clamp(p.x), clamp(p.y)))
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.3" stroke="{color}" stroke-width="{}"/>"#,
                    pts.join(" "),
                    style.stroke_width
                );
            }
        }
        if let Some((x0, y0, _, _)) = inst.geometry.bounding_box() {
            let x = clamp(x0);
            let y = (f64::from(clamp(y0)) - 2.0)
                .max(style.font_size)
                .min(f64::from(c));
            let _ = writeln!(
                out,
                r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="{}" fill="{color}">{label}</text>"#,
                style.font_size
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grayscale heatmap of a location prior, one square per grid cell.
pub fn render_heatmap(prior: &LocationPrior, size: u32) -> String {
    let g = prior.grid_size;
    let cell = f64::from(size) / g as f64;
    let max = prior
        .grid
        .iter()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut out = String::new();
    header(&mut out, size, size);
    for r in 0..g {
        for col in 0..g {
            let shade = 255 - (255.0 * prior.at(r, col) / max).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.3}" y="{:.3}" width="{cell:.3}" height="{cell:.3}" fill="rgb({shade},{shade},{shade})"/>"#,
                col as f64 * cell,
                r as f64 * cell
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of a shape prior over its log-ratio bins.
pub fn render_histogram(prior: &ShapePrior, width: u32, height: u32) -> String {
    let n = prior.bins.len();
    let bar = f64::from(width) / n as f64;
    let max = prior
        .bins
        .iter()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut out = String::new();
    header(&mut out, width, height);
    for (i, &p) in prior.bins.iter().enumerate() {
        let h = f64::from(height) * p / max;
        let _ = writeln!(
            out,
            r#"<rect x="{:.3}" y="{:.3}" width="{bar:.3}" height="{h:.3}" fill="{}"/>"#,
            i as f64 * bar,
            f64::from(height) - h,
            category_color(&prior.category)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{AnnotationKind, DataType, SceneInstance, SizeFlag};

    fn record(geometry: QuantGeometry, kp: u32) -> SceneRecord {
        SceneRecord {
            annotation_type: geometry.kind(),
            data_type: DataType::MultipleInstances,
            size_flag: SizeFlag::Large,
            n_keypoints: kp,
            instances: vec![SceneInstance {
                category: "person".into(),
                geometry,
            }],
        }
    }

    #[test]
    fn one_box() {
        let svg = render_svg(
            &record(
                QuantGeometry::Box {
                    xmin: 10,
                    ymin: 20,
                    xmax: 100,
                    ymax: 200,
                },
                0,
            ),
            &RenderStyle::default(),
        );
        assert_eq!(svg.matches("<rect").count(), 2);
        assert_eq!(svg.matches("<text").count(), 1);
        assert!(svg.contains(r#"x="10" y="20" width="90" height="180""#));
    }

    #[test]
    fn skeleton_counts() {
        let pts: Vec<Point> = (0..14)
            .map(|i| Point::new(10 + i * 5, 30 + i * 7))
            .collect();
        let svg = render_svg(
            &record(QuantGeometry::Keypoints(pts.clone()), 14),
            &RenderStyle::default(),
        );
        assert_eq!(svg.matches("<circle").count(), 14);
        assert_eq!(svg.matches("<line").count(), 13);

        let mut hidden = pts;
        hidden[13] = Point::HIDDEN;
        let svg = render_svg(
            &record(QuantGeometry::Keypoints(hidden), 14),
            &RenderStyle::default(),
        );
        assert_eq!(svg.matches("<circle").count(), 13);
        let incident = SKELETON_14
            .iter()
            .filter(|&&(a, b)| a == 13 || b == 13)
            .count();
        assert_eq!(svg.matches("<line").count(), 13 - incident);

        let pts: Vec<Point> = (0..18).map(|i| Point::new(100 + i, 100 + 2 * i)).collect();
        let svg = render_svg(
            &record(QuantGeometry::Keypoints(pts), 18),
            &RenderStyle::default(),
        );
        assert_eq!(svg.matches("<line").count(), 18);
    }

    #[test]
    fn mask_polygon_and_escaping() {
        let mut r = record(
            QuantGeometry::Mask(vec![
                Point::new(1, 1),
                Point::new(50, 1),
                Point::new(25, 40),
            ]),
            0,
        );
        r.instances[0].category = "a<b".into();
        let svg = render_svg(&r, &RenderStyle::default());
        assert!(svg.contains(r#"points="1,1 50,1 25,40""#));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(r.annotation_type, AnnotationKind::Mask);
    }

    #[test]
    fn hash_and_color_are_stable() {
        let r = record(
            QuantGeometry::Box {
                xmin: 1,
                ymin: 2,
                xmax: 3,
                ymax: 4,
            },
            0,
        );
        assert_eq!(record_hash(&r), record_hash(&r.clone()));
        assert_eq!(category_color("dog"), category_color("dog"));
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
