//! Scene-layout priors learned by a small decoder-only transformer.
//!
//! Annotations (boxes, human keypoints, instance masks) are mapped onto a
//! 512×512 canvas, serialized into a flat sentence language, tokenized
//! word-by-word and used to train a causal language model. Samples drawn
//! from that model are parsed back into layouts and compared against the
//! ground truth through location, shape and relation priors.
//!
//! Module map:
//!
//! - [`annotations`]: COCO-subset ingest, canvas transform, size flags, polar mask sampling
//! - [`grammar`]: sequence templates, parser and the token-level state machine
//! - [`tokenizer`]: whole-word vocabulary, encode/decode
//! - [`model`]: transformer, hand-written backward pass, Adam, checkpoints
//! - [`sampler`]: prompted (optionally constrained) autoregressive generation
//! - [`evalsuite`]: priors, KL divergence, quality and controllability metrics
//! - [`render`]: SVG output for layouts and prior plots
//! - [`synthetic`]: a layout generator with known priors, used for end-to-end checks

pub mod annotations;
pub mod evalsuite;
pub mod grammar;
pub mod model;
pub mod render;
pub mod sampler;
pub mod synthetic;
pub mod tokenizer;

pub use annotations::{
    AnnotationKind, DataType, Point, QuantGeometry, SceneInstance, SceneRecord, SizeFlag,
};
pub use grammar::{Template, CANVAS_MAX};
pub use tokenizer::Vocabulary;
