//! The keyword model: a strided convolutional encoder, a linear classifier
//! head and a projector into the 128-dimensional contrastive space.
//!
//! Reference encoder ("tinyconv"): four 3x3 conv blocks with 32, 64, 64 and
//! 128 channels, stride 2 and relu, then global average pooling, so the
//! embedding size equals the last channel width. About 0.13M parameters
//! excluding the projector. There is no batch-coupled normalization, so
//! every sample's outputs depend only on that sample.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParameterSet, Real, Tape, Tensor, Var};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// dense -> relu -> dense
    TwoLayer,
    /// dense -> relu
    OneLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub proj_dim: usize,
    pub projector: ProjectorKind,
    pub n_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![32, 64, 64, 128],
            kernel: 3,
            stride: 2,
            proj_dim: 128,
            projector: ProjectorKind::TwoLayer,
            n_classes: crate::dataset::NUM_CLASSES,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("model.channels must be non-empty and positive".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("model.kernel and model.stride must be positive".into()));
        }
        if self.proj_dim != 128 {
            return Err(Error::Config(format!("model.proj_dim must be 128, got {}", self.proj_dim)));
        }
        if self.n_classes != crate::dataset::NUM_CLASSES {
            return Err(Error::Config(format!(
                "model.n_classes must be {}, got {}",
                crate::dataset::NUM_CLASSES,
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Latent size D of the encoder output.
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }
}

fn conv_name(i: usize, part: &str) -> String {
    format!("encoder.conv{i}.{part}")
}

/// Weights are `U(-bound, bound)` with `bound = sqrt(6 / fan_in)` for layers
/// followed by relu and `1 / sqrt(fan_in)` otherwise; biases are zero.
pub fn init_params(config: &ModelConfig) -> Result<ParameterSet<f32>> {
    config.validate()?;
    let mut r = rng::keyed(&[config.init_seed], 4);
    let mut params = ParameterSet::new();
    let mut uniform = |shape: &[usize], fan_in: usize, relu: bool| -> Result<Tensor<f32>> {
        let bound = if relu {
            (6.0 / fan_in as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-bound..bound) as f32).collect();
        Tensor::new(shape.to_vec(), data)
    };

    let k = config.kernel;
    let mut c_in = 1;
    for (i, &c_out) in config.channels.iter().enumerate() {
        params.insert(conv_name(i, "weight"), uniform(&[c_out, c_in, k, k], c_in * k * k, true)?)?;
        params.insert(conv_name(i, "bias"), Tensor::zeros(&[c_out]))?;
        c_in = c_out;
    }
    let d = config.embed_dim();
    let (p, classes) = (config.proj_dim, config.n_classes);
    params.insert("classifier.weight", uniform(&[d, classes], d, false)?)?;
    params.insert("classifier.bias", Tensor::zeros(&[classes]))?;
    params.insert("projector.fc1.weight", uniform(&[d, p], d, config.projector == ProjectorKind::TwoLayer)?)?;
    params.insert("projector.fc1.bias", Tensor::zeros(&[p]))?;
    if config.projector == ProjectorKind::TwoLayer {
        params.insert("projector.fc2.weight", uniform(&[p, p], p, false)?)?;
        params.insert("projector.fc2.bias", Tensor::zeros(&[p]))?;
    }
    Ok(params)
}

/// Parameter count of encoder plus classifier (the usual "model size"),
/// and of the projector.
pub fn param_counts<T: Real>(params: &ParameterSet<T>) -> (usize, usize) {
    params.iter().fold((0, 0), |(model, proj), (name, t)| {
        if name.starts_with("projector.") {
            (model, proj + t.len())
        } else {
            (model + t.len(), proj)
        }
    })
}

/// Forward passes over parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct KeywordModel {
    pub config: ModelConfig,
}

impl KeywordModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(KeywordModel { config })
    }

    /// `[B, T, F]` features (any T, F at least one kernel after padding) to `[B, D]` embeddings.
    pub fn encoder_forward<T: Real>(&self, tape: &Tape<T>, params: &BoundParams, feats: Var) -> Result<Var> {
        let shape = tape.shape(feats);
        let [batch, frames, bins] = shape[..] else {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: shape,
                rhs: vec![0, crate::features::N_FRAMES, crate::features::N_MELS],
            });
        };
        let mut h = tape.reshape(feats, &[batch, 1, frames, bins])?;
        for i in 0..self.config.channels.len() {
            let w = params.get(&conv_name(i, "weight"))?;
            let b = params.get(&conv_name(i, "bias"))?;
            h = tape.conv2d(h, w, Some(b), self.config.stride, self.config.padding())?;
            h = tape.relu(h)?;
        }
        tape.global_avg_pool(h)
    }

    pub fn classifier_forward<T: Real>(&self, tape: &Tape<T>, params: &BoundParams, embedding: Var) -> Result<Var> {
        tape.dense(embedding, params.get("classifier.weight")?, params.get("classifier.bias")?)
    }

    pub fn projector_forward<T: Real>(&self, tape: &Tape<T>, params: &BoundParams, embedding: Var) -> Result<Var> {
        let h = tape.dense(embedding, params.get("projector.fc1.weight")?, params.get("projector.fc1.bias")?)?;
        let h = tape.relu(h)?;
        match self.config.projector {
            ProjectorKind::OneLayer => Ok(h),
            ProjectorKind::TwoLayer => {
                tape.dense(h, params.get("projector.fc2.weight")?, params.get("projector.fc2.bias")?)
            }
        }
    }
}
