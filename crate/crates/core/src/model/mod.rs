//! Configurable 2D encoder-decoder segmentation network.
//!
//! The teacher and student share this architecture; they differ only in the
//! number of output channels of the final 1×1 projection. Every block is
//! conv3×3 → instance norm → ReLU; downsampling is 2×2 max pooling and
//! upsampling is nearest-neighbor followed by convolution on the
//! concatenated skip. The decoder feature tap at level `l` is the post-norm,
//! pre-activation output of the decoder block at resolution (H/2^l, W/2^l).

pub mod adam;
pub mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::*;

/// Architecture hyper-parameters shared by teachers and the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// 2 for a teacher, K+1 for the student.
    pub out_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    /// Channels at the first encoder level; doubles per level.
    pub base_width: usize,
    /// Decoder level of the feature tap (resolution H/2^l).
    pub feature_tap_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 2,
            depth: 3,
            base_width: 16,
            feature_tap_level: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        if self.out_channels < 2 {
            return Err(Error::config(format!(
                "out_channels must be >= 2, got {}",
                self.out_channels
            )));
        }
        if self.depth < 1 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.base_width < 1 {
            return Err(Error::config("base_width must be >= 1"));
        }
        if self.feature_tap_level >= self.depth {
            return Err(Error::config(format!(
                "feature_tap_level {} must be below depth {}",
                self.feature_tap_level, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channel count of the decoder feature tap.
    pub fn tap_channels(&self) -> usize {
        self.width(self.feature_tap_level)
    }
}

/// Logits plus the decoder feature tap(s) for one input image.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// Keyed by decoder level; holds the configured tap level only.
    pub features: BTreeMap<usize, Tensor>,
}

impl ForwardResult {
    pub fn tap(&self) -> &Tensor {
        self.features.values().next().expect("one feature tap is always present")
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Encoder-decoder segmentation model with named parameter tensors.
#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    params: Vec<Param>,
    // Index ranges into `params` per block: (weight, bias, gamma, beta).
    enc: Vec<[usize; 4]>,
    bottleneck: [usize; 4],
    dec: Vec<[usize; 4]>,
    head: [usize; 2],
}

/// Per-parameter gradient tensors, aligned with [`SegModel::params`].
pub type GradientSet = Vec<Tensor>;

struct BlockCache {
    input: Tensor,
    norm: NormCache,
    pre_relu: Tensor,
}

/// Everything the backward pass needs, for one input image.
pub struct ForwardCache {
    enc: Vec<BlockCache>,
    pool_argmax: Vec<Vec<u32>>,
    pool_in_shape: Vec<Vec<usize>>,
    bottleneck: BlockCache,
    dec: Vec<BlockCache>,
    head_input: Tensor,
}

/// Builds a model with deterministic He-normal initialization.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<SegModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut enc = Vec::new();
    let mut dec = Vec::new();

    let mut push_block = |params: &mut Vec<Param>, name: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng| {
        let start = params.len();
        params.push(Param {
            name: format!("{name}.conv.weight"),
            tensor: he_normal(&[co, ci, 3, 3], ci * 9, rng),
        });
        params.push(Param {
            name: format!("{name}.conv.bias"),
            tensor: Tensor::zeros(&[co]),
        });
        params.push(Param {
            name: format!("{name}.norm.gamma"),
            tensor: Tensor::full(&[co], 1.0),
        });
        params.push(Param {
            name: format!("{name}.norm.beta"),
            tensor: Tensor::zeros(&[co]),
        });
        [start, start + 1, start + 2, start + 3]
    };

    let mut ci = config.in_channels;
    for d in 0..config.depth {
        let co = config.width(d);
        enc.push(push_block(&mut params, &format!("enc{d}"), ci, co, &mut rng));
        ci = co;
    }
    let bott_co = config.width(config.depth);
    let bottleneck = push_block(&mut params, "bottleneck", ci, bott_co, &mut rng);
    for d in (0..config.depth).rev() {
        // Incoming channels: upsampled previous output plus the skip.
        let up_ch = config.width(d + 1);
        let co = config.width(d);
        dec.push(push_block(&mut params, &format!("dec{d}"), up_ch + co, co, &mut rng));
    }
    let head_w = params.len();
    params.push(Param {
        name: "head.weight".to_string(),
        tensor: he_normal(&[config.out_channels, config.base_width], config.base_width, &mut rng),
    });
    params.push(Param {
        name: "head.bias".to_string(),
        tensor: Tensor::zeros(&[config.out_channels]),
    });

    for p in &mut params {
        p.tensor.quantize_f32();
    }

    Ok(SegModel {
        config,
        params,
        enc,
        bottleneck,
        dec,
        head: [head_w, head_w + 1],
    })
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl SegModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn num_scalar_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_gradients(&self) -> GradientSet {
        self.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = input.chw()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}×{w} not divisible by 2^{}",
                self.config.depth
            )));
        }
        Ok((h, w))
    }

    /// Inference forward pass for one C×H×W image.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardResult> {
        let (result, _) = self.forward_train(input)?;
        Ok(result)
    }

    /// Forward pass over a batch; items are independent.
    pub fn forward_batch(&self, batch: &[Tensor]) -> Result<Vec<ForwardResult>> {
        batch.iter().map(|item| self.forward(item)).collect()
    }

    /// Forward pass that also returns the caches needed by [`Self::backward`].
    pub fn forward_train(&self, input: &Tensor) -> Result<(ForwardResult, ForwardCache)> {
        self.check_input(input)?;
        let mut enc_caches = Vec::with_capacity(self.config.depth);
        let mut pool_argmax = Vec::with_capacity(self.config.depth);
        let mut pool_in_shape = Vec::with_capacity(self.config.depth);
        let mut skips: Vec<Tensor> = Vec::with_capacity(self.config.depth);

        let mut x = input.clone();
        for d in 0..self.config.depth {
            let (out, cache) = self.block_forward(self.enc[d], &x);
            skips.push(out.clone());
            enc_caches.push(cache);
            pool_in_shape.push(out.shape().to_vec());
            let (pooled, argmax) = maxpool2_forward(&out);
            pool_argmax.push(argmax);
            x = pooled;
        }
        let (bott_out, bott_cache) = self.block_forward(self.bottleneck, &x);
        x = bott_out;

        let mut dec_caches = Vec::with_capacity(self.config.depth);
        let mut tap: Option<Tensor> = None;
        for (i, d) in (0..self.config.depth).rev().enumerate() {
            let up = upsample2_forward(&x);
            let cat = concat_channels(&up, &skips[d]);
            let (out, cache) = self.block_forward(self.dec[i], &cat);
            if d == self.config.feature_tap_level {
                tap = Some(cache.pre_relu.clone());
            }
            dec_caches.push(cache);
            x = out;
        }
        let head_input = x;
        let logits = conv1x1_forward(
            &head_input,
            &self.params[self.head[0]].tensor,
            &self.params[self.head[1]].tensor,
        );
        let mut features = BTreeMap::new();
        features.insert(self.config.feature_tap_level, tap.expect("tap level below depth"));
        Ok((
            ForwardResult { logits, features },
            ForwardCache {
                enc: enc_caches,
                pool_argmax,
                pool_in_shape,
                bottleneck: bott_cache,
                dec: dec_caches,
                head_input,
            },
        ))
    }

    fn block_forward(&self, idx: [usize; 4], input: &Tensor) -> (Tensor, BlockCache) {
        let conv_out = conv3x3_forward(input, &self.params[idx[0]].tensor, &self.params[idx[1]].tensor);
        let (pre_relu, norm) = instance_norm_forward(&conv_out, &self.params[idx[2]].tensor, &self.params[idx[3]].tensor);
        let out = relu_forward(&pre_relu);
        (
            out,
            BlockCache {
                input: input.clone(),
                norm,
                pre_relu,
            },
        )
    }

    fn block_backward(
        &self,
        idx: [usize; 4],
        cache: &BlockCache,
        d_out_post_relu: &Tensor,
        d_pre_relu_extra: Option<&Tensor>,
        grads: &mut GradientSet,
    ) -> Tensor {
        let mut d_pre = relu_backward(&cache.pre_relu, d_out_post_relu);
        if let Some(extra) = d_pre_relu_extra {
            for (d, &e) in d_pre.data_mut().iter_mut().zip(extra.data()) {
                *d += e;
            }
        }
        let (d_conv_out, d_gamma, d_beta) =
            instance_norm_backward(&cache.norm, &self.params[idx[2]].tensor, &d_pre);
        let (d_input, d_w, d_b) = conv3x3_backward(&cache.input, &self.params[idx[0]].tensor, &d_conv_out);
        accumulate(&mut grads[idx[0]], &d_w);
        accumulate(&mut grads[idx[1]], &d_b);
        accumulate(&mut grads[idx[2]], &d_gamma);
        accumulate(&mut grads[idx[3]], &d_beta);
        d_input
    }

    /// Backpropagates loss gradients (with respect to the logits and,
    /// optionally, the feature tap) into a parameter gradient set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
        d_tap: Option<&Tensor>,
    ) -> Result<GradientSet> {
        let mut grads = self.zero_gradients();
        let (d_head_in, d_head_w, d_head_b) = conv1x1_backward(
            &cache.head_input,
            &self.params[self.head[0]].tensor,
            d_logits,
        );
        accumulate(&mut grads[self.head[0]], &d_head_w);
        accumulate(&mut grads[self.head[1]], &d_head_b);

        // Decoder blocks, fine to coarse (reverse of the forward loop).
        let mut d_x = d_head_in;
        let mut d_skips: Vec<Option<Tensor>> = vec![None; self.config.depth];
        for (i, d) in (0..self.config.depth).rev().enumerate().rev() {
            let extra = if d == self.config.feature_tap_level { d_tap } else { None };
            let d_cat = self.block_backward(self.dec[i], &cache.dec[i], &d_x, extra, &mut grads);
            let up_ch = self.config.width(d + 1);
            let (d_up, d_skip) = split_channels(&d_cat, up_ch);
            d_skips[d] = Some(d_skip);
            d_x = upsample2_backward(&d_up);
        }

        let d_bott_in = self.block_backward(self.bottleneck, &cache.bottleneck, &d_x, None, &mut grads);
        let mut d_pooled = d_bott_in;
        for d in (0..self.config.depth).rev() {
            let mut d_enc_out = maxpool2_backward(&d_pooled, &cache.pool_argmax[d], &cache.pool_in_shape[d]);
            if let Some(ds) = &d_skips[d] {
                accumulate(&mut d_enc_out, ds);
            }
            d_pooled = self.block_backward(self.enc[d], &cache.enc[d], &d_enc_out, None, &mut grads);
        }
        Ok(grads)
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Sums gradient sets elementwise in index order.
pub fn add_gradients(dst: &mut GradientSet, src: &GradientSet) {
    for (d, s) in dst.iter_mut().zip(src) {
        accumulate(d, s);
    }
}

/// Scales every gradient tensor in place.
pub fn scale_gradients(grads: &mut GradientSet, factor: f64) {
    for g in grads {
        for v in g.data_mut() {
            *v *= factor;
        }
    }
}
