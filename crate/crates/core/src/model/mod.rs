//! Convolutional encoder with a linear embedding layer, followed by a
//! residual MLP classification head.

mod checkpoint;
mod conv;
mod network;
mod real;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use network::{
    argmax, head_forward, predict, ClassProbs, EmbeddingBlock, EncoderTrace, HeadTrace, Mode,
    Network,
};
pub use real::Real;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub families: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    /// Filters of the 3×3 stride-1 "same" convolutions.
    pub same_filters: Vec<usize>,
    pub same_kernel: usize,
    /// Filters of the stride-2 "valid" convolutions.
    pub valid_filters: Vec<usize>,
    pub valid_kernel: usize,
    pub valid_stride: usize,
    /// Width of the pointwise linear embedding layer.
    pub embed_dim: usize,
    pub mlp_width: usize,
    pub mlp_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 400,
            families: 61,
            dropout_rate: 0.2,
            leaky_slope: 0.01,
            same_filters: vec![32, 64, 128],
            same_kernel: 3,
            valid_filters: vec![128, 128, 256, 256, 256, 256],
            valid_kernel: 5,
            valid_stride: 2,
            embed_dim: 256,
            mlp_width: 128,
            mlp_blocks: 3,
        }
    }
}

/// One convolution layer of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_size: usize,
    pub out_size: usize,
}

/// Output side length of a strided, padded convolution; `None` if the kernel
/// does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl ModelConfig {
    /// Desk-scale plan for 100×100 inputs: the Table I layer pattern with
    /// roughly an eighth of the filters and the four trailing valid convs
    /// that fit a 100-pixel input (100→48→22→9→3).
    pub fn desk(families: usize) -> Self {
        Self {
            input_size: 100,
            families,
            same_filters: vec![4, 8, 16],
            valid_filters: vec![16, 16, 32, 32],
            embed_dim: 32,
            mlp_width: 32,
            ..Self::default()
        }
    }

    /// Tiny plan on 32×32 inputs (32→14→5) for gradient checks.
    pub fn tiny(families: usize) -> Self {
        Self {
            input_size: 32,
            families,
            same_filters: vec![2, 3],
            valid_filters: vec![4, 4],
            embed_dim: 4,
            mlp_width: 6,
            mlp_blocks: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::config("model.input_size", "must be positive"));
        }
        if self.families == 0 {
            return Err(Error::config("model.families", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("model.leaky_slope", "must be finite"));
        }
        if self.same_kernel % 2 == 0 {
            return Err(Error::config("model.same_kernel", "must be odd"));
        }
        if self.valid_kernel == 0 || self.valid_stride == 0 {
            return Err(Error::config("model.valid_kernel", "kernel and stride must be positive"));
        }
        for (key, v) in [
            ("model.same_filters", &self.same_filters),
            ("model.valid_filters", &self.valid_filters),
        ] {
            if v.contains(&0) {
                return Err(Error::config(key, "filter counts must be positive"));
            }
        }
        if self.embed_dim == 0 || self.mlp_width == 0 {
            return Err(Error::config("model.embed_dim", "layer widths must be positive"));
        }
        self.try_conv_specs()?;
        Ok(())
    }

    fn try_conv_specs(&self) -> Result<Vec<ConvSpec>> {
        let mut specs = Vec::new();
        let mut ch = 1;
        let mut size = self.input_size;
        let pad = self.same_kernel / 2;
        for &out_ch in &self.same_filters {
            let out = conv_out_size(size, self.same_kernel, 1, pad).unwrap_or(0);
            specs.push(ConvSpec {
                in_ch: ch,
                out_ch,
                kernel: self.same_kernel,
                stride: 1,
                pad,
                in_size: size,
                out_size: out,
            });
            ch = out_ch;
            size = out;
        }
        for (i, &out_ch) in self.valid_filters.iter().enumerate() {
            let out = conv_out_size(size, self.valid_kernel, self.valid_stride, 0).ok_or_else(|| {
                Error::config(
                    "model.input_size",
                    format!(
                        "{} is too small: valid conv {i} receives a {size}×{size} map",
                        self.input_size
                    ),
                )
            })?;
            specs.push(ConvSpec {
                in_ch: ch,
                out_ch,
                kernel: self.valid_kernel,
                stride: self.valid_stride,
                pad: 0,
                in_size: size,
                out_size: out,
            });
            ch = out_ch;
            size = out;
        }
        Ok(specs)
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.try_conv_specs().expect("validated model config")
    }

    /// Spatial side length after the input and after every convolution.
    pub fn spatial_chain(&self) -> Vec<usize> {
        std::iter::once(self.input_size)
            .chain(self.conv_specs().iter().map(|s| s.out_size))
            .collect()
    }

    pub fn embed_side(&self) -> usize {
        *self.spatial_chain().last().unwrap()
    }

    /// `(height, width, channels)` of the embedding block.
    pub fn embedding_shape(&self) -> (usize, usize, usize) {
        let s = self.embed_side();
        (s, s, self.embed_dim)
    }

    pub fn embedding_len(&self) -> usize {
        let (h, w, c) = self.embedding_shape();
        h * w * c
    }

    fn last_conv_channels(&self) -> usize {
        self.valid_filters
            .last()
            .or(self.same_filters.last())
            .copied()
            .unwrap_or(1)
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let specs = self.conv_specs();
        let n_same = self.same_filters.len();
        for (i, s) in specs.iter().enumerate() {
            let name = if i < n_same {
                format!("encoder.same{i}")
            } else {
                format!("encoder.valid{}", i - n_same)
            };
            out.push((
                format!("{name}.weight"),
                vec![s.out_ch, s.in_ch, s.kernel, s.kernel],
            ));
            out.push((format!("{name}.bias"), vec![s.out_ch]));
        }
        let c = self.last_conv_channels();
        out.push(("encoder.embed.weight".into(), vec![self.embed_dim, c]));
        out.push(("encoder.embed.bias".into(), vec![self.embed_dim]));
        let w = self.mlp_width;
        out.push(("head.proj.weight".into(), vec![w, self.embedding_len()]));
        out.push(("head.proj.bias".into(), vec![w]));
        for i in 0..self.mlp_blocks {
            out.push((format!("head.block{i}.weight"), vec![w, w]));
            out.push((format!("head.block{i}.bias"), vec![w]));
        }
        out.push(("head.out.weight".into(), vec![self.families, w]));
        out.push(("head.out.bias".into(), vec![self.families]));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }
}

/// Every weight of one network instance, in [`ModelConfig::param_layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub role: Role,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &ModelConfig, role: Role) -> Self {
        Self {
            role,
            tensors: config
                .param_layout()
                .into_iter()
                .map(|(name, shape)| Tensor::zeros(name, shape))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            role: self.role,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn signature(&self) -> Vec<(&str, &[usize])> {
        self.tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect()
    }

    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::StructuralMismatch(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::StructuralMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let want = config.param_layout();
        if want.len() != self.tensors.len()
            || want
                .iter()
                .zip(&self.tensors)
                .any(|((n, s), t)| *n != t.name || *s != t.shape)
        {
            return Err(Error::StructuralMismatch(
                "parameters do not match the model config".into(),
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            role: self.role,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Fan-in scaled uniform initialization; biases start at zero.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut params = ModelParams::zeros(config, Role::Student);
    let mut rng = stream(seed, Purpose::Init, &[]);
    let slope = config.leaky_slope;
    for t in params.tensors.iter_mut() {
        if !t.name.ends_with(".weight") {
            continue;
        }
        let fan_in: usize = t.shape[1..].iter().product();
        // He-uniform for leaky units; plain variance-preserving for the linear layers
        let gain = if t.name.starts_with("encoder.embed") || t.name.starts_with("head.out") {
            1.0
        } else {
            2.0 / (1.0 + slope * slope)
        };
        let bound = (3.0 * gain / fan_in as f64).sqrt();
        for v in t.data.iter_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    }
    Ok(params)
}
