#![allow(dead_code)]

use layoutprior::{
    AnnotationKind, DataType, Point, QuantGeometry, SceneInstance, SceneRecord, SizeFlag,
};
use proptest::prelude::*;

pub const CATEGORIES: [&str; 6] = [
    "person",
    "dining table",
    "cup",
    "teddy bear",
    "dog",
    "traffic light",
];

fn point() -> impl Strategy<Value = Point> {
    (0u32..=512, 0u32..=512).prop_map(|(x, y)| Point::new(x, y))
}

fn geometry(kind: AnnotationKind, n_kp: u32) -> BoxedStrategy<QuantGeometry> {
    match kind {
        AnnotationKind::Box => (0u32..=512, 0u32..=512, 0u32..=512, 0u32..=512)
            .prop_map(|(a, b, c, d)| QuantGeometry::Box {
                xmin: a.min(c),
                ymin: b.min(d),
                xmax: a.max(c),
                ymax: b.max(d),
            })
            .boxed(),
        AnnotationKind::Keypoint => proptest::collection::vec(point(), n_kp as usize)
            .prop_map(QuantGeometry::Keypoints)
            .boxed(),
        AnnotationKind::Mask => proptest::collection::vec(point(), 36)
            .prop_map(QuantGeometry::Mask)
            .boxed(),
    }
}

pub fn scene() -> impl Strategy<Value = SceneRecord> {
    let header = (
        prop_oneof![
            Just((AnnotationKind::Box, 0u32)),
            Just((AnnotationKind::Keypoint, 14)),
            Just((AnnotationKind::Keypoint, 18)),
            Just((AnnotationKind::Mask, 0)),
        ],
        prop_oneof![
            Just(DataType::ObjectCentric),
            Just(DataType::MultipleInstances)
        ],
        prop_oneof![
            Just(SizeFlag::Small),
            Just(SizeFlag::Medium),
            Just(SizeFlag::Large)
        ],
    );
    header.prop_flat_map(|((kind, n_kp), data_type, size_flag)| {
        let inst = (0..CATEGORIES.len(), geometry(kind, n_kp)).prop_map(|(c, g)| SceneInstance {
            category: CATEGORIES[c].to_string(),
            geometry: g,
        });
        proptest::collection::vec(inst, 1..5).prop_map(move |instances| SceneRecord {
            annotation_type: kind,
            data_type,
            size_flag,
            n_keypoints: n_kp,
            instances,
        })
    })
}

/// Order-insensitive view of a record's instances.
pub fn sorted_instances(r: &SceneRecord) -> Vec<String> {
    let mut v: Vec<String> = r.instances.iter().map(|i| format!("{i:?}")).collect();
    v.sort();
    v
}
