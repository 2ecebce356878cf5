use rand::Rng;

use super::conv;
use super::real::Real;
use super::{ConvSpec, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::preprocess::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of the encoder's linear embedding layer, stored channel-major
/// (`values[c * h * w + y * w + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock<T = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> EmbeddingBlock<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs<T = f32> {
    pub probs: Vec<T>,
}

impl<T: Real> ClassProbs<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> T {
        self.probs[self.argmax()]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct ConvCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    drop: Option<Vec<T>>,
}

/// Activations retained by a train- or eval-mode encoder pass for backprop.
pub struct EncoderTrace<T> {
    convs: Vec<ConvCache<T>>,
    embed_input: Vec<T>,
}

struct BlockCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    drop: Option<Vec<T>>,
}

pub struct HeadTrace<T> {
    flat: Vec<T>,
    proj_pre: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    last_hidden: Vec<T>,
    pub probs: ClassProbs<T>,
}

/// Forward and backward passes for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    specs: Vec<ConvSpec>,
}

fn leaky<T: Real>(z: T, slope: T) -> T {
    if z > T::zero() {
        z
    } else {
        z * slope
    }
}

fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// `out[i] = b[i] + Σ_j w[i, j] x[j]` for a row-major `(rows, cols)` weight.
fn dense<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let row = &w[i * cols..(i + 1) * cols];
            bi + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
        })
        .collect()
}

/// Accumulates `dw += dy xᵀ`, `db += dy` and returns `wᵀ dy`.
fn dense_backward<T: Real>(w: &[T], x: &[T], dy: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let cols = x.len();
    let mut dx = vec![T::zero(); cols];
    for (i, &g) in dy.iter().enumerate() {
        db[i] += g;
        if g == T::zero() {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        let drow = &mut dw[i * cols..(i + 1) * cols];
        for j in 0..cols {
            drow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            specs: config.conv_specs(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed_index(&self) -> usize {
        2 * self.specs.len()
    }

    fn proj_index(&self) -> usize {
        self.embed_index() + 2
    }

    fn block_index(&self, i: usize) -> usize {
        self.proj_index() + 2 + 2 * i
    }

    fn out_index(&self) -> usize {
        self.block_index(self.config.mlp_blocks)
    }

    fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        params.check_layout(&self.config)
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        let s = self.config.input_size;
        if image.height != s || image.width != s {
            return Err(Error::shape(
                format!("{s}x{s} image"),
                format!("{}x{}", image.height, image.width),
            ));
        }
        Ok(())
    }

    fn check_embedding<T: Real>(&self, emb: &EmbeddingBlock<T>) -> Result<()> {
        let (h, w, c) = self.config.embedding_shape();
        if emb.shape() != (h, w, c) || emb.values.len() != h * w * c {
            return Err(Error::shape(
                format!("{h}x{w}x{c} embedding"),
                format!("{}x{}x{}", emb.height, emb.width, emb.channels),
            ));
        }
        Ok(())
    }

    pub fn encoder_forward<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        image: &GrayImage,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EmbeddingBlock<T>> {
        Ok(self.encoder_forward_traced(params, image, mode, rng)?.0)
    }

    pub fn encoder_forward_traced<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        image: &GrayImage,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(EmbeddingBlock<T>, EncoderTrace<T>)> {
        self.check_params(params)?;
        self.check_image(image)?;
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let rate = self.config.dropout_rate;
        let mut x: Vec<T> = image.pixels.iter().map(|&p| T::from_f64_lossy(p as f64)).collect();
        let mut convs = Vec::with_capacity(self.specs.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let w = &params.tensors[2 * i].data;
            let b = &params.tensors[2 * i + 1].data;
            let mut pre = vec![T::zero(); spec.out_ch * spec.out_size * spec.out_size];
            conv::forward(spec, &x, w, b, &mut pre);
            let mut act: Vec<T> = pre.iter().map(|&z| leaky(z, slope)).collect();
            let drop = (mode == Mode::Train && rate > 0.0).then(|| {
                let m = dropout_mask(act.len(), rate, rng);
                for (a, &k) in act.iter_mut().zip(&m) {
                    *a = *a * k;
                }
                m
            });
            convs.push(ConvCache {
                input: std::mem::replace(&mut x, act),
                pre,
                drop,
            });
        }

        // pointwise linear map over channels at every spatial position
        let side = self.config.embed_side();
        let positions = side * side;
        let in_ch = self.specs.last().map(|s| s.out_ch).unwrap_or(1);
        let e = self.config.embed_dim;
        let w = &params.tensors[self.embed_index()].data;
        let b = &params.tensors[self.embed_index() + 1].data;
        let mut out = vec![T::zero(); e * positions];
        T::gemm(e, in_ch, positions, T::one(), w, in_ch, 1, &x, positions, 1, T::zero(), &mut out, positions, 1);
        for (c, &bc) in b.iter().enumerate() {
            for v in &mut out[c * positions..(c + 1) * positions] {
                *v += bc;
            }
        }
        let block = EmbeddingBlock {
            height: side,
            width: side,
            channels: e,
            values: out,
        };
        Ok((
            block,
            EncoderTrace {
                convs,
                embed_input: x,
            },
        ))
    }

    /// Backpropagates `d_embed` through the encoder, accumulating into `grads`.
    pub fn encoder_backward<T: Real>(
        &self,
        params: &ModelParams<T>,
        trace: &EncoderTrace<T>,
        d_embed: &[T],
        grads: &mut ModelParams<T>,
    ) {
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let side = self.config.embed_side();
        let positions = side * side;
        let in_ch = self.specs.last().map(|s| s.out_ch).unwrap_or(1);
        let e = self.config.embed_dim;
        let ei = self.embed_index();
        {
            let (dw, db) = two_mut(&mut grads.tensors, ei);
            T::gemm(e, positions, in_ch, T::one(), d_embed, positions, 1, &trace.embed_input, 1, positions, T::one(), dw, in_ch, 1);
            for c in 0..e {
                db[c] += d_embed[c * positions..(c + 1) * positions].iter().copied().sum::<T>();
            }
        }
        let mut dx = vec![T::zero(); in_ch * positions];
        T::gemm(in_ch, e, positions, T::one(), &params.tensors[ei].data, 1, in_ch, d_embed, positions, 1, T::zero(), &mut dx, positions, 1);

        for (i, spec) in self.specs.iter().enumerate().rev() {
            let cache = &trace.convs[i];
            let mut dz = dx;
            if let Some(m) = &cache.drop {
                for (g, &k) in dz.iter_mut().zip(m) {
                    *g = *g * k;
                }
            }
            for (g, &z) in dz.iter_mut().zip(&cache.pre) {
                if z <= T::zero() {
                    *g = *g * slope;
                }
            }
            let mut dinput = (i > 0).then(|| vec![T::zero(); cache.input.len()]);
            let (dw, db) = two_mut(&mut grads.tensors, 2 * i);
            conv::backward(spec, &cache.input, &params.tensors[2 * i].data, &dz, dw, db, dinput.as_deref_mut());
            dx = dinput.unwrap_or_default();
        }
    }

    pub fn head_forward<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        embedding: &EmbeddingBlock<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ClassProbs<T>> {
        Ok(self.head_forward_traced(params, embedding, mode, rng)?.probs)
    }

    pub fn head_forward_traced<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ModelParams<T>,
        embedding: &EmbeddingBlock<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HeadTrace<T>> {
        self.check_params(params)?;
        self.check_embedding(embedding)?;
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let rate = self.config.dropout_rate;
        let t = &params.tensors;
        let pi = self.proj_index();
        let flat = embedding.values.clone();
        let proj_pre = dense(&t[pi].data, &t[pi + 1].data, &flat);
        let mut h: Vec<T> = proj_pre.iter().map(|&z| leaky(z, slope)).collect();
        let mut blocks = Vec::with_capacity(self.config.mlp_blocks);
        for i in 0..self.config.mlp_blocks {
            let bi = self.block_index(i);
            let pre = dense(&t[bi].data, &t[bi + 1].data, &h);
            let mut act: Vec<T> = pre.iter().map(|&z| leaky(z, slope)).collect();
            let drop = (mode == Mode::Train && rate > 0.0).then(|| {
                let m = dropout_mask(act.len(), rate, rng);
                for (a, &k) in act.iter_mut().zip(&m) {
                    *a = *a * k;
                }
                m
            });
            let next: Vec<T> = h.iter().zip(&act).map(|(&a, &b)| a + b).collect();
            blocks.push(BlockCache {
                input: std::mem::replace(&mut h, next),
                pre,
                drop,
            });
        }
        let oi = self.out_index();
        let logits = dense(&t[oi].data, &t[oi + 1].data, &h);
        Ok(HeadTrace {
            flat,
            proj_pre,
            blocks,
            last_hidden: h,
            probs: ClassProbs::from_logits(&logits),
        })
    }

    /// Backpropagates a logit gradient through the head; returns the
    /// gradient with respect to the (flattened) embedding.
    pub fn head_backward<T: Real>(
        &self,
        params: &ModelParams<T>,
        trace: &HeadTrace<T>,
        d_logits: &[T],
        grads: &mut ModelParams<T>,
    ) -> Vec<T> {
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let t = &params.tensors;
        let oi = self.out_index();
        let mut dh = {
            let (dw, db) = two_mut(&mut grads.tensors, oi);
            dense_backward(&t[oi].data, &trace.last_hidden, d_logits, dw, db)
        };
        for i in (0..self.config.mlp_blocks).rev() {
            let cache = &trace.blocks[i];
            let mut dpre = dh.clone();
            if let Some(m) = &cache.drop {
                for (g, &k) in dpre.iter_mut().zip(m) {
                    *g = *g * k;
                }
            }
            for (g, &z) in dpre.iter_mut().zip(&cache.pre) {
                if z <= T::zero() {
                    *g = *g * slope;
                }
            }
            let bi = self.block_index(i);
            let (dw, db) = two_mut(&mut grads.tensors, bi);
            let dx = dense_backward(&t[bi].data, &cache.input, &dpre, dw, db);
            for (a, b) in dh.iter_mut().zip(dx) {
                *a += b;
            }
        }
        for (g, &z) in dh.iter_mut().zip(&trace.proj_pre) {
            if z <= T::zero() {
                *g = *g * slope;
            }
        }
        let pi = self.proj_index();
        let (dw, db) = two_mut(&mut grads.tensors, pi);
        dense_backward(&t[pi].data, &trace.flat, &dh, dw, db)
    }

    /// Eval-mode class prediction.
    pub fn predict<T: Real>(&self, params: &ModelParams<T>, image: &GrayImage) -> Result<usize> {
        Ok(self.classify(params, image)?.argmax())
    }

    /// Eval-mode class probabilities.
    pub fn classify<T: Real>(&self, params: &ModelParams<T>, image: &GrayImage) -> Result<ClassProbs<T>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let emb = self.encoder_forward(params, image, Mode::Eval, &mut rng)?;
        self.head_forward(params, &emb, Mode::Eval, &mut rng)
    }
}

/// Weight and bias gradient buffers of layer tensors `i` and `i + 1`.
fn two_mut<T>(tensors: &mut [super::Tensor<T>], i: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = tensors.split_at_mut(i + 1);
    (&mut a[i].data, &mut b[0].data)
}

/// Free-function form of [`Network::head_forward`] for callers that hold only
/// a config.
pub fn head_forward<T: Real, R: Rng + ?Sized>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    embedding: &EmbeddingBlock<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ClassProbs<T>> {
    Network::new(config)?.head_forward(params, embedding, mode, rng)
}

pub fn predict<T: Real>(config: &ModelConfig, params: &ModelParams<T>, image: &GrayImage) -> Result<usize> {
    Network::new(config)?.predict(params, image)
}
