use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use super::{ModelConfig, ModelError};

pub const INIT_STD: f64 = 0.02;

/// Name, shape and offset of one tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
            };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let wte = add("wte".into(), vec![cfg.vocab_size, d]);
        let wpe = add("wpe".into(), vec![cfg.context_window, d]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1.g"), vec![d]),
                ln1_b: add(p("ln1.b"), vec![d]),
                qkv_w: add(p("attn.qkv.w"), vec![d, 3 * d]),
                qkv_b: add(p("attn.qkv.b"), vec![3 * d]),
                proj_w: add(p("attn.proj.w"), vec![d, d]),
                proj_b: add(p("attn.proj.b"), vec![d]),
                ln2_g: add(p("ln2.g"), vec![d]),
                ln2_b: add(p("ln2.b"), vec![d]),
                fc_w: add(p("mlp.fc.w"), vec![d, 4 * d]),
                fc_b: add(p("mlp.fc.b"), vec![4 * d]),
                fc2_w: add(p("mlp.proj.w"), vec![4 * d, d]),
                fc2_b: add(p("mlp.proj.b"), vec![d]),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        Layout {
            tensors,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total,
        }
    }
}

/// Model weights in one flat buffer. The output projection is tied to `wte`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) data: Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for spec in &layout.tensors {
            let leaf = spec.name.rsplit('.').next().unwrap_or("");
            let slice = &mut data[spec.range()];
            match (spec.shape.len(), leaf) {
                (1, "g") => slice.fill(T::one()),
                (1, _) => {}
                _ => slice
                    .iter_mut()
                    .for_each(|x| *x = T::c(normal.sample(&mut rng))),
            }
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub(crate) fn from_parts(config: &ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.data[offset..offset + len]
    }
}
