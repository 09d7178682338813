//! Polar resampling of instance-mask polygons.
//!
//! Rays leave the vertex centroid at `n` evenly spaced angles; each sample is
//! the farthest point where its ray crosses the polygon boundary. Sample 0
//! points along −x and the sweep runs counterclockwise as seen on the canvas
//! (left, bottom, right, top), which is the labeling order of `m0..m{n-1}` in
//! serialized mask groups.

use std::f64::consts::PI;

use super::{quantize, AnnotationError, Point};

const RAY_EPS: f64 = 1e-9;

pub fn polar_sample_mask(polygon: &[Point], n: usize) -> Result<Vec<Point>, AnnotationError> {
    if n < 3 {
        return Err(AnnotationError::InvalidInput(format!(
            "polar sampling needs at least 3 points, got {n}"
        )));
    }
    if polygon.len() < 3 || shoelace(polygon) == 0 {
        return Err(AnnotationError::DegeneratePolygon);
    }
    let verts: Vec<(f64, f64)> = polygon
        .iter()
        .map(|p| (f64::from(p.x), f64::from(p.y)))
        .collect();
    let (sx, sy) = verts
        .iter()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let centroid = (sx / verts.len() as f64, sy / verts.len() as f64);

    let distances: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let (dx, dy) = ray_direction(i, n);
            farthest_hit(centroid, (dx, dy), &verts)
        })
        .collect();

    // Misses reuse the closest preceding angle that hit, wrapping around.
    let first_hit = distances
        .iter()
        .rposition(Option::is_some)
        .ok_or(AnnotationError::DegeneratePolygon)?;
    let mut last = distances[first_hit].unwrap_or(0.0);
    let mut out = Vec::with_capacity(n);
    for (i, d) in distances.iter().enumerate() {
        let dist = match d {
            Some(d) => {
                last = *d;
                *d
            }
            None => last,
        };
        let (dx, dy) = ray_direction(i, n);
        out.push(Point::new(
            quantize(centroid.0 + dist * dx),
            quantize(centroid.1 + dist * dy),
        ));
    }
    Ok(out)
}

/// Unit direction of ray `i` in canvas coordinates (y grows downward).
pub(crate) fn ray_direction(i: usize, n: usize) -> (f64, f64) {
    let theta = 2.0 * PI * i as f64 / n as f64;
    (-theta.cos(), theta.sin())
}

fn farthest_hit(origin: (f64, f64), dir: (f64, f64), verts: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..verts.len() {
        let a = verts[i];
        let b = verts[(i + 1) % verts.len()];
        let e = (b.0 - a.0, b.1 - a.1);
        let denom = cross(dir, e);
        if denom.abs() < RAY_EPS {
            continue;
        }
        let w = (a.0 - origin.0, a.1 - origin.1);
        let t = cross(w, e) / denom;
        let s = cross(w, dir) / denom;
        if t > RAY_EPS && (-RAY_EPS..=1.0 + RAY_EPS).contains(&s) {
            best = Some(best.map_or(t, |b: f64| b.max(t)));
        }
    }
    best
}

fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

fn shoelace(p: &[Point]) -> i64 {
    let n = p.len();
    (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            i64::from(a.x) * i64::from(b.y) - i64::from(b.x) * i64::from(a.y)
        })
        .sum::<i64>()
        .abs()
}
