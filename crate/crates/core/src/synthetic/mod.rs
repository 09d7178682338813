//! Box layouts drawn from a generator whose priors are known in closed form.
//!
//! Category A sits in the top-left quadrant with `ln(w/h) ~ N(ln 2, σ)`;
//! category B is square and sits in the bottom half. A scene holds both with
//! probability `co_occurrence`, otherwise only one of them (even odds). The
//! scene size flag is drawn first and every instance is sized inside that
//! class, so the flag always agrees with the average area.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotations::{
    AnnotationKind, DataType, QuantGeometry, SceneInstance, SceneRecord, SizeFlag, CANVAS_MAX,
};

pub const CATEGORY_A: &str = "kite";
pub const CATEGORY_B: &str = "bench";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPriors {
    pub co_occurrence: f64,
    pub aspect_log_mean: f64,
    pub aspect_log_std: f64,
    pub min_count: u32,
    pub max_count: u32,
}

impl Default for SyntheticPriors {
    fn default() -> Self {
        SyntheticPriors {
            co_occurrence: 0.7,
            aspect_log_mean: 2f64.ln(),
            aspect_log_std: 0.1,
            min_count: 2,
            max_count: 10,
        }
    }
}

/// Area interval `[lo, hi)` of a size class.
fn area_range(size: SizeFlag) -> (u64, u64) {
    match size {
        SizeFlag::Small => (64, 1024),
        SizeFlag::Medium => (1024, 9216),
        SizeFlag::Large => (9216, u64::MAX),
    }
}

fn boxed(category: &str, x: u32, y: u32, w: u32, h: u32) -> SceneInstance {
    SceneInstance {
        category: category.to_string(),
        geometry: QuantGeometry::Box {
            xmin: x,
            ymin: y,
            xmax: x + w,
            ymax: y + h,
        },
    }
}

impl SyntheticPriors {
    pub fn categories(&self) -> Vec<String> {
        vec![CATEGORY_A.to_string(), CATEGORY_B.to_string()]
    }

    fn box_a(&self, size: SizeFlag, rng: &mut ChaCha8Rng) -> SceneInstance {
        let half = CANVAS_MAX / 2;
        let (lo, hi) = area_range(size);
        let heights = match size {
            SizeFlag::Small => 6..=22,
            SizeFlag::Medium => 23..=67,
            SizeFlag::Large => 68..=120,
        };
        let ratio = Normal::new(self.aspect_log_mean, self.aspect_log_std).expect("finite std");
        loop {
            let h: u32 = rng.random_range(heights.clone());
            let w = (f64::from(h) * ratio.sample(rng).exp()).round() as u32;
            let area = u64::from(w) * u64::from(h);
            if w == 0 || w > half || area < lo || area >= hi {
                continue;
            }
            let x = rng.random_range(0..=half - w);
            let y = rng.random_range(0..=half - h);
            return boxed(CATEGORY_A, x, y, w, h);
        }
    }

    fn box_b(&self, size: SizeFlag, rng: &mut ChaCha8Rng) -> SceneInstance {
        let half = CANVAS_MAX / 2;
        let side = match size {
            SizeFlag::Small => rng.random_range(8..=31),
            SizeFlag::Medium => rng.random_range(32..=95),
            SizeFlag::Large => rng.random_range(96..=250),
        };
        let x = rng.random_range(0..=CANVAS_MAX - side);
        let y = rng.random_range(half..=CANVAS_MAX - side);
        boxed(CATEGORY_B, x, y, side, side)
    }

    pub fn scene(&self, rng: &mut ChaCha8Rng) -> SceneRecord {
        let size = SizeFlag::ALL[rng.random_range(0..3)];
        self.scene_with(size, rng.random_range(self.min_count..=self.max_count), rng)
    }

    /// A scene with a fixed size class and instance count (at least 2 when both
    /// categories are present).
    pub fn scene_with(&self, size: SizeFlag, count: u32, rng: &mut ChaCha8Rng) -> SceneRecord {
        let both = count >= 2 && rng.random_bool(self.co_occurrence);
        let n_a = if both {
            rng.random_range(1..count)
        } else if rng.random_bool(0.5) {
            count
        } else {
            0
        };
        let mut instances: Vec<SceneInstance> = (0..n_a).map(|_| self.box_a(size, rng)).collect();
        instances.extend((n_a..count).map(|_| self.box_b(size, rng)));
        SceneRecord {
            annotation_type: AnnotationKind::Box,
            data_type: DataType::MultipleInstances,
            size_flag: size,
            n_keypoints: 0,
            instances,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<SceneRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.scene(&mut rng)).collect()
    }
}

/// Baseline layouts: same categories and counts, corners uniform over the canvas.
pub fn uniform_layouts(categories: &[String], n: usize, seed: u64) -> Vec<SceneRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let count = rng.random_range(2..=10);
            let instances: Vec<SceneInstance> = (0..count)
                .map(|_| {
                    let c = &categories[rng.random_range(0..categories.len())];
                    let (a, b) = (
                        rng.random_range(0..CANVAS_MAX),
                        rng.random_range(0..CANVAS_MAX),
                    );
                    let (c0, c1) = (
                        rng.random_range(0..CANVAS_MAX),
                        rng.random_range(0..CANVAS_MAX),
                    );
                    SceneInstance {
                        category: c.clone(),
                        geometry: QuantGeometry::Box {
                            xmin: a.min(b),
                            ymin: c0.min(c1),
                            xmax: a.max(b) + 1,
                            ymax: c0.max(c1) + 1,
                        },
                    }
                })
                .collect();
            let size = crate::annotations::classify_size(&instances).expect("nonempty");
            SceneRecord {
                annotation_type: AnnotationKind::Box,
                data_type: DataType::MultipleInstances,
                size_flag: size,
                n_keypoints: 0,
                instances,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::classify_size;

    #[test]
    fn scenes_respect_the_stated_priors() {
        let g = SyntheticPriors::default();
        let scenes = g.generate(4000, 3);
        let mut both = 0;
        let mut log_ratios = Vec::new();
        for s in &scenes {
            s.validate().unwrap();
            assert_eq!(classify_size(&s.instances).unwrap(), s.size_flag);
            assert!((2..=10).contains(&s.instances.len()));
            let has = |c: &str| s.instances.iter().any(|i| i.category == c);
            if has(CATEGORY_A) && has(CATEGORY_B) {
                both += 1;
            }
            for i in &s.instances {
                let (x0, y0, x1, y1) = i.geometry.bounding_box().unwrap();
                if i.category == CATEGORY_A {
                    assert!(x1 <= 256 && y1 <= 256);
                    log_ratios.push((f64::from(x1 - x0) / f64::from(y1 - y0)).ln());
                } else {
                    assert!(y0 >= 256 && y1 <= 512);
                    assert_eq!(x1 - x0, y1 - y0);
                }
            }
        }
        let rate = f64::from(both) / scenes.len() as f64;
        assert!((rate - 0.7).abs() < 0.03, "{rate}");
        let mean = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
        assert!((mean - 2f64.ln()).abs() < 0.03, "{mean}");
    }

    #[test]
    fn generation_is_seeded() {
        let g = SyntheticPriors::default();
        assert_eq!(g.generate(50, 1), g.generate(50, 1));
        assert_ne!(g.generate(50, 1), g.generate(50, 2));
    }

    #[test]
    fn uniform_layouts_are_valid() {
        for s in uniform_layouts(&SyntheticPriors::default().categories(), 200, 0) {
            s.validate().unwrap();
        }
    }
}
