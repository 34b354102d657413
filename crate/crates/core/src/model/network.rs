use ndarray::{Array4, ArrayView4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::classifier::GlobalClassifier;
use super::layers::{self, Act, BnCache};
use super::params::{Gradients, ParamStore};
use crate::error::{BmlError, Result};
use crate::rng::{rng_from, stream};

pub const RESNET12_CHANNELS: [usize; 4] = [64, 160, 320, 640];
pub const DESK_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const NUM_BLOCKS: usize = 4;

/// Smallest input that survives four 2× poolings.
pub const MIN_INPUT_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub block_channels: Vec<usize>,
    /// Number of leading blocks shared by both views (0..=4).
    pub shared_depth: usize,
    pub input_size: usize,
    pub dropblock_enabled: bool,
    pub drop_rate: f32,
    pub drop_block_size: usize,
    /// Selects the reduced widths in [`DESK_CHANNELS`] regardless of `block_channels`.
    pub desk_scale: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::resnet12()
    }
}

impl BackboneConfig {
    /// Full-width ResNet-12 on 84×84 inputs, last block per view.
    pub fn resnet12() -> Self {
        Self {
            block_channels: RESNET12_CHANNELS.to_vec(),
            shared_depth: 3,
            input_size: 84,
            dropblock_enabled: false,
            drop_rate: 0.1,
            drop_block_size: 5,
            desk_scale: false,
        }
    }

    /// Reduced-width variant on 32×32 inputs.
    pub fn desk() -> Self {
        Self {
            block_channels: DESK_CHANNELS.to_vec(),
            input_size: 32,
            desk_scale: true,
            ..Self::resnet12()
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        if self.desk_scale {
            DESK_CHANNELS.to_vec()
        } else {
            self.block_channels.clone()
        }
    }

    /// Feature dimension `m` of the output maps.
    pub fn feature_dim(&self) -> usize {
        *self.channels().last().unwrap_or(&0)
    }

    /// Spatial side of the output maps for an `input`-pixel image.
    pub fn output_size(input: usize) -> usize {
        (0..NUM_BLOCKS).fold(input, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if ch.len() != NUM_BLOCKS || ch.contains(&0) {
            return Err(BmlError::Config(format!("block_channels must be 4 positive widths, got {ch:?}")));
        }
        if self.shared_depth > NUM_BLOCKS {
            return Err(BmlError::Config(format!("shared_depth {} exceeds {NUM_BLOCKS} blocks", self.shared_depth)));
        }
        if self.input_size < MIN_INPUT_SIZE {
            return Err(BmlError::Config(format!("input_size must be >= {MIN_INPUT_SIZE}")));
        }
        if !(0.0..1.0).contains(&self.drop_rate) || self.drop_block_size == 0 {
            return Err(BmlError::Config("dropblock needs rate in [0, 1) and block size >= 1".into()));
        }
        Ok(())
    }
}

/// Trainable scalars of a dual-view network with a `num_classes`-way
/// point-wise classifier on the global view. Running batch-norm statistics
/// are buffers, not parameters.
pub fn parameter_count(config: &BackboneConfig, num_classes: usize) -> usize {
    let ch = config.channels();
    let mut c_in = 3;
    let mut total = 0;
    for (i, &c) in ch.iter().enumerate() {
        let block = 9 * c_in * c + 2 * 9 * c * c + c_in * c + 4 * 2 * c;
        total += if i < config.shared_depth { block } else { 2 * block };
        c_in = c;
    }
    total + c_in * num_classes + num_classes
}

/// Paired spatial feature maps `[batch, h, w, m]` from the two views.
#[derive(Debug, Clone, PartialEq)]
pub struct DualViewFeatures {
    pub global_map: Array4<f32>,
    pub local_map: Array4<f32>,
}

/// Which heads a training pass needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewMask {
    pub global: bool,
    pub local: bool,
}

impl ViewMask {
    pub const BOTH: ViewMask = ViewMask { global: true, local: true };
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockLayout {
    c_in: usize,
    c_out: usize,
    /// Index among the four blocks; DropBlock acts on blocks 3 and 4.
    depth: usize,
    conv: [usize; 3],
    shortcut: usize,
    gamma: [usize; 4],
    beta: [usize; 4],
    mean: [usize; 4],
    var: [usize; 4],
}

struct BlockCache {
    x: Act,
    a1: Act,
    a2: Act,
    bn: [BnCache; 4],
    pre_pool: Act,
    pool_arg: Vec<u8>,
    drop_mask: Option<Vec<f32>>,
}

/// Activations retained by [`BmlNetwork::forward_train`] for the backward pass.
pub struct TrainCache {
    trunk: Vec<BlockCache>,
    global: Vec<BlockCache>,
    local: Vec<BlockCache>,
    views: ViewMask,
    out_shape: (usize, usize, usize, usize),
}

/// Output of a training-mode forward pass; maps for unrequested views are `None`.
pub struct TrainForward {
    pub global_map: Option<Array4<f32>>,
    pub local_map: Option<Array4<f32>>,
    pub cache: TrainCache,
}

/// The dual-view backbone plus the global point-wise classifier.
#[derive(Debug, Clone)]
pub struct BmlNetwork {
    config: BackboneConfig,
    num_classes: usize,
    params: ParamStore,
    buffers: ParamStore,
    trunk: Vec<BlockLayout>,
    global_head: Vec<BlockLayout>,
    local_head: Vec<BlockLayout>,
    classifier_weight: usize,
    classifier_bias: usize,
}

impl BmlNetwork {
    /// Builds a network with fan-in scaled normal initialization for convolutions,
    /// unit/zero batch-norm affine terms and a uniform classifier.
    pub fn new(config: BackboneConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(BmlError::Config("classifier needs at least one base class".into()));
        }
        let mut rng = rng_from(seed, &[stream::INIT]);
        let mut params = ParamStore::default();
        let mut buffers = ParamStore::default();
        let channels = config.channels();

        let mut build_block = |prefix: &str, depth: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng| {
            let mut conv = |name: &str, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
                let fan_in = (ci * k * k) as f32;
                let std = (2.0 / fan_in).sqrt();
                let data = (0..c_out * ci * k * k)
                    .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
                    .collect();
                params.push(format!("{prefix}.{name}"), vec![c_out, ci, k, k], data)
            };
            let conv_idx = [conv("conv1", c_in, 3, rng), conv("conv2", c_out, 3, rng), conv("conv3", c_out, 3, rng)];
            let shortcut = conv("shortcut", c_in, 1, rng);
            let mut gamma = [0; 4];
            let mut beta = [0; 4];
            let mut mean = [0; 4];
            let mut var = [0; 4];
            for (i, bn) in ["bn1", "bn2", "bn3", "bn_shortcut"].iter().enumerate() {
                gamma[i] = params.push(format!("{prefix}.{bn}.gamma"), vec![c_out], vec![1.0; c_out]);
                beta[i] = params.push(format!("{prefix}.{bn}.beta"), vec![c_out], vec![0.0; c_out]);
                mean[i] = buffers.push(format!("{prefix}.{bn}.running_mean"), vec![c_out], vec![0.0; c_out]);
                var[i] = buffers.push(format!("{prefix}.{bn}.running_var"), vec![c_out], vec![1.0; c_out]);
            }
            BlockLayout {
                c_in,
                c_out,
                depth,
                conv: conv_idx,
                shortcut,
                gamma,
                beta,
                mean,
                var,
            }
        };

        let mut trunk = Vec::new();
        let mut global_head = Vec::new();
        let mut local_head = Vec::new();
        let mut c_in = 3;
        for (depth, &c_out) in channels.iter().enumerate() {
            if depth < config.shared_depth {
                trunk.push(build_block(&format!("trunk.block{}", depth + 1), depth, c_in, c_out, &mut rng));
            } else {
                global_head.push(build_block(&format!("global.block{}", depth + 1), depth, c_in, c_out, &mut rng));
                local_head.push(build_block(&format!("local.block{}", depth + 1), depth, c_in, c_out, &mut rng));
            }
            c_in = c_out;
        }
        let m = c_in;
        let bound = 1.0 / (m as f32).sqrt();
        let w = (0..num_classes * m).map(|_| rng.random_range(-bound..bound)).collect();
        let classifier_weight = params.push("classifier.weight".into(), vec![num_classes, m, 1, 1], w);
        let b = (0..num_classes).map(|_| rng.random_range(-bound..bound)).collect();
        let classifier_bias = params.push("classifier.bias".into(), vec![num_classes], b);

        Ok(Self {
            config,
            num_classes,
            params,
            buffers,
            trunk,
            global_head,
            local_head,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn classifier(&self) -> GlobalClassifier<'_> {
        GlobalClassifier::from_slices(
            self.params.data(self.classifier_weight),
            self.params.data(self.classifier_bias),
            self.num_classes,
            self.feature_dim(),
        )
    }

    pub fn classifier_indices(&self) -> (usize, usize) {
        (self.classifier_weight, self.classifier_bias)
    }

    /// Parameter indices owned by each part: (trunk, global head, local head).
    pub fn part_indices(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let collect = |blocks: &[BlockLayout]| {
            blocks
                .iter()
                .flat_map(|b| b.conv.iter().chain([&b.shortcut]).chain(&b.gamma).chain(&b.beta).copied())
                .collect::<Vec<_>>()
        };
        (collect(&self.trunk), collect(&self.global_head), collect(&self.local_head))
    }

    fn check_images(&self, images: &ArrayView4<f32>, strict: bool) -> Result<()> {
        let (n, h, w, c) = images.dim();
        if n == 0 || c != 3 {
            return Err(BmlError::shape(format!("expected [batch>0, h, w, 3] images, got {:?}", images.dim())));
        }
        if strict && (h != self.config.input_size || w != self.config.input_size) {
            return Err(BmlError::shape(format!(
                "images are {h}x{w}, model expects {s}x{s}",
                s = self.config.input_size
            )));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(BmlError::shape(format!("images must be at least {MIN_INPUT_SIZE}px, got {h}x{w}")));
        }
        Ok(())
    }

    fn to_act(images: &ArrayView4<f32>) -> Act {
        let (n, h, w, c) = images.dim();
        let owned = images.as_standard_layout();
        Act::from_nhwc(n, h, w, c, owned.as_slice().expect("standard layout"))
    }

    fn to_map(act: &Act) -> Array4<f32> {
        Array4::from_shape_vec((act.n, act.h, act.w, act.c), act.to_nhwc()).expect("shape")
    }

    fn block_eval(&self, b: &BlockLayout, x: &Act) -> Act {
        let p = &self.params;
        let bn = |x: &Act, i: usize| {
            layers::bn_forward_eval(
                x,
                p.data(b.gamma[i]),
                p.data(b.beta[i]),
                self.buffers.data(b.mean[i]),
                self.buffers.data(b.var[i]),
            )
        };
        let mut a = bn(&layers::conv_forward(x, p.data(b.conv[0]), b.c_out, 3), 0);
        layers::leaky_relu(&mut a);
        let mut a2 = bn(&layers::conv_forward(&a, p.data(b.conv[1]), b.c_out, 3), 1);
        layers::leaky_relu(&mut a2);
        let mut out = bn(&layers::conv_forward(&a2, p.data(b.conv[2]), b.c_out, 3), 2);
        out.add_assign(&bn(&layers::conv_forward(x, p.data(b.shortcut), b.c_out, 1), 3));
        layers::leaky_relu(&mut out);
        layers::maxpool_forward(&out).0
    }

    fn block_train(&mut self, b: &BlockLayout, x: Act, rng: &mut ChaCha8Rng) -> (Act, BlockCache) {
        let p = &self.params;
        let bufs = &mut self.buffers;
        let mut bn = |x: &Act, i: usize| {
            let (mean, var) = two_mut(&mut bufs.tensors, b.mean[i], b.var[i]);
            layers::bn_forward_train(x, p.data(b.gamma[i]), p.data(b.beta[i]), &mut mean.data, &mut var.data)
        };
        let (mut a1, c1) = bn(&layers::conv_forward(&x, p.data(b.conv[0]), b.c_out, 3), 0);
        layers::leaky_relu(&mut a1);
        let (mut a2, c2) = bn(&layers::conv_forward(&a1, p.data(b.conv[1]), b.c_out, 3), 1);
        layers::leaky_relu(&mut a2);
        let (mut sum, c3) = bn(&layers::conv_forward(&a2, p.data(b.conv[2]), b.c_out, 3), 2);
        let (short, cs) = bn(&layers::conv_forward(&x, p.data(b.shortcut), b.c_out, 1), 3);
        sum.add_assign(&short);
        layers::leaky_relu(&mut sum);
        let (mut out, pool_arg) = layers::maxpool_forward(&sum);
        let drop_mask = if self.config.dropblock_enabled && b.depth >= 2 {
            layers::dropblock_mask(&out, self.config.drop_rate, self.config.drop_block_size, rng)
        } else {
            None
        };
        if let Some(mask) = &drop_mask {
            out.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
        let cache = BlockCache {
            x,
            a1,
            a2,
            bn: [c1, c2, c3, cs],
            pre_pool: sum,
            pool_arg,
            drop_mask,
        };
        (out, cache)
    }

    fn block_backward(&self, b: &BlockLayout, cache: &BlockCache, mut grad: Act, grads: &mut Gradients) -> Act {
        let p = &self.params;
        if let Some(mask) = &cache.drop_mask {
            grad.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }
        let mut g_sum = layers::maxpool_backward(&grad, &cache.pool_arg, cache.pre_pool.h, cache.pre_pool.w);
        layers::leaky_relu_backward(&mut g_sum, &cache.pre_pool);

        let bn_back = |g: &Act, i: usize, grads: &mut Gradients| {
            let (gg, gb) = two_mut(&mut grads.tensors, b.gamma[i], b.beta[i]);
            layers::bn_backward(g, &cache.bn[i], p.data(b.gamma[i]), gg, gb)
        };
        let g_c3 = bn_back(&g_sum, 2, grads);
        let mut g_a2 = layers::conv_backward(&cache.a2, p.data(b.conv[2]), &g_c3, 3, grads.get_mut(b.conv[2]));
        layers::leaky_relu_backward(&mut g_a2, &cache.a2);
        let g_c2 = bn_back(&g_a2, 1, grads);
        let mut g_a1 = layers::conv_backward(&cache.a1, p.data(b.conv[1]), &g_c2, 3, grads.get_mut(b.conv[1]));
        layers::leaky_relu_backward(&mut g_a1, &cache.a1);
        let g_c1 = bn_back(&g_a1, 0, grads);
        let mut g_x = layers::conv_backward(&cache.x, p.data(b.conv[0]), &g_c1, 3, grads.get_mut(b.conv[0]));

        let g_s = bn_back(&g_sum, 3, grads);
        let g_short = layers::conv_backward(&cache.x, p.data(b.shortcut), &g_s, 1, grads.get_mut(b.shortcut));
        g_x.add_assign(&g_short);
        g_x
    }

    fn run_eval(&self, images: &ArrayView4<f32>, strict: bool) -> Result<DualViewFeatures> {
        self.check_images(images, strict)?;
        let mut x = Self::to_act(images);
        for b in &self.trunk {
            x = self.block_eval(b, &x);
        }
        let head = |blocks: &[BlockLayout]| blocks.iter().fold(x.clone(), |a, b| self.block_eval(b, &a));
        let global = head(&self.global_head);
        let local = head(&self.local_head);
        Ok(DualViewFeatures {
            global_map: Self::to_map(&global),
            local_map: Self::to_map(&local),
        })
    }

    /// Inference-mode forward pass (running batch-norm statistics, no
    /// DropBlock). Images are `[batch, input_size, input_size, 3]` in `[0, 1]`.
    pub fn forward(&self, images: ArrayView4<f32>) -> Result<DualViewFeatures> {
        self.run_eval(&images, true)
    }

    /// As [`forward`](Self::forward) but accepts any spatial size of at least
    /// [`MIN_INPUT_SIZE`]; the network is fully convolutional.
    pub fn forward_any_size(&self, images: ArrayView4<f32>) -> Result<DualViewFeatures> {
        self.run_eval(&images, false)
    }

    /// Training-mode forward pass: batch statistics (running stats updated),
    /// DropBlock when enabled, activations cached for [`backward`](Self::backward).
    pub fn forward_train(&mut self, images: ArrayView4<f32>, views: ViewMask, rng: &mut ChaCha8Rng) -> Result<TrainForward> {
        self.check_images(&images, true)?;
        let mut x = Self::to_act(&images);
        let trunk_layout = self.trunk.clone();
        let mut trunk = Vec::with_capacity(trunk_layout.len());
        for b in &trunk_layout {
            let (y, cache) = self.block_train(b, x, rng);
            trunk.push(cache);
            x = y;
        }
        let mut run_head = |net: &mut Self, layout: Vec<BlockLayout>, enabled: bool| {
            if !enabled {
                return (None, Vec::new());
            }
            let mut a = x.clone();
            let mut caches = Vec::with_capacity(layout.len());
            for b in &layout {
                let (y, cache) = net.block_train(b, a, rng);
                caches.push(cache);
                a = y;
            }
            (Some(a), caches)
        };
        let (global, global_caches) = run_head(self, self.global_head.clone(), views.global);
        let (local, local_caches) = run_head(self, self.local_head.clone(), views.local);
        let shape_src = global.as_ref().or(local.as_ref()).unwrap_or(&x);
        let out_shape = (shape_src.n, shape_src.h, shape_src.w, shape_src.c);
        Ok(TrainForward {
            global_map: global.as_ref().map(Self::to_map),
            local_map: local.as_ref().map(Self::to_map),
            cache: TrainCache {
                trunk,
                global: global_caches,
                local: local_caches,
                views,
                out_shape,
            },
        })
    }

    /// Back-propagates map gradients (`[batch, h, w, m]`) through the heads and
    /// trunk, accumulating into `grads`.
    pub fn backward(
        &self,
        cache: &TrainCache,
        grad_global: Option<&Array4<f32>>,
        grad_local: Option<&Array4<f32>>,
        grads: &mut Gradients,
    ) -> Result<()> {
        let (n, h, w, c) = cache.out_shape;
        let to_act = |g: &Array4<f32>| -> Result<Act> {
            if g.dim() != cache.out_shape {
                return Err(BmlError::shape(format!("map gradient {:?} vs maps {:?}", g.dim(), cache.out_shape)));
            }
            Ok(Self::to_act(&g.view()))
        };
        let mut trunk_grad: Option<Act> = None;
        let mut accumulate = |g: Act| match trunk_grad.as_mut() {
            Some(t) => t.add_assign(&g),
            None => trunk_grad = Some(g),
        };
        for (grad, enabled, layout, caches) in [
            (grad_global, cache.views.global, &self.global_head, &cache.global),
            (grad_local, cache.views.local, &self.local_head, &cache.local),
        ] {
            let Some(grad) = grad else { continue };
            if !enabled {
                return Err(BmlError::invalid("gradient supplied for a view that was not computed"));
            }
            let mut g = to_act(grad)?;
            for (b, bc) in layout.iter().zip(caches).rev() {
                g = self.block_backward(b, bc, g, grads);
            }
            accumulate(g);
        }
        let mut g = trunk_grad.unwrap_or_else(|| Act::zeros(c, n, h, w));
        for (b, bc) in self.trunk.iter().zip(&cache.trunk).rev() {
            g = self.block_backward(b, bc, g, grads);
        }
        Ok(())
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    fn tiny_config(shared_depth: usize) -> BackboneConfig {
        BackboneConfig {
            block_channels: vec![2, 3, 3, 4],
            shared_depth,
            input_size: 16,
            desk_scale: false,
            ..BackboneConfig::resnet12()
        }
    }

    fn images(n: usize, size: usize, k: f32) -> Array4<f32> {
        Array4::from_shape_fn((n, size, size, 3), |(b, y, x, c)| {
            0.5 + 0.5 * ((b * 31 + y * 7 + x * 3 + c) as f32 * k).sin()
        })
    }

    #[test]
    fn resnet12_output_is_5x5x640() {
        assert_eq!(BackboneConfig::output_size(84), 5);
        assert_eq!(BackboneConfig::resnet12().feature_dim(), 640);
        assert_eq!(BackboneConfig::output_size(32), 2);
    }

    #[test]
    fn desk_forward_shape() {
        let net = BmlNetwork::new(BackboneConfig::desk(), 5, 0).unwrap();
        let out = net.forward(images(2, 32, 0.1).view()).unwrap();
        assert_eq!(out.global_map.dim(), (2, 2, 2, 128));
        assert_eq!(out.local_map.dim(), (2, 2, 2, 128));
    }

    #[test]
    fn fully_shared_views_are_identical() {
        let net = BmlNetwork::new(tiny_config(4), 3, 1).unwrap();
        let out = net.forward(images(3, 16, 0.3).view()).unwrap();
        assert_eq!(out.global_map, out.local_map);
    }

    #[test]
    fn zero_trunk_gives_finite_maps() {
        let mut net = BmlNetwork::new(tiny_config(3), 3, 1).unwrap();
        for t in &mut net.params_mut().tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let zeros = Array4::zeros((2, 16, 16, 3));
        let out = net.forward(zeros.view()).unwrap();
        assert!(out.global_map.iter().chain(out.local_map.iter()).all(|v| v.is_finite()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tf = net.forward_train(zeros.view(), ViewMask::BOTH, &mut rng).unwrap();
        assert!(tf.global_map.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = BmlNetwork::new(tiny_config(3), 3, 1).unwrap();
        assert!(net.forward(images(1, 20, 0.1).view()).is_err());
        assert!(net.forward_any_size(images(1, 20, 0.1).view()).is_ok());
        assert!(net.forward_any_size(images(1, 12, 0.1).view()).is_err());
        assert!(net.forward(Array4::zeros((1, 16, 16, 1)).view()).is_err());
    }

    #[test]
    fn no_parameters_shared_at_depth_zero() {
        let net = BmlNetwork::new(tiny_config(0), 3, 1).unwrap();
        let (trunk, global, local) = net.part_indices();
        assert!(trunk.is_empty());
        assert_eq!(global.len(), local.len());
        assert!(global.iter().all(|g| !local.contains(g)));
    }

    #[test]
    fn parameter_count_matches_store() {
        for depth in 0..=4 {
            let cfg = tiny_config(depth);
            let net = BmlNetwork::new(cfg.clone(), 7, 0).unwrap();
            assert_eq!(net.parameter_count(), parameter_count(&cfg, 7), "depth {depth}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = BmlNetwork::new(tiny_config(2), 3, 5).unwrap();
        let x = images(2, 16, 0.2);
        assert_eq!(net.forward(x.view()).unwrap(), net.forward(x.view()).unwrap());
    }

    /// Full-network gradient check: loss = <probe_g, global> + <probe_l, local>
    /// in training mode (batch statistics). Single precision, so tolerances are loose.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny_config(2);
        let mut net = BmlNetwork::new(cfg, 3, 11).unwrap();
        let x = images(3, 16, 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tf = net.forward_train(x.view(), ViewMask::BOTH, &mut rng).unwrap();
        let shape = tf.global_map.as_ref().unwrap().dim();
        let probe_g = Array4::from_shape_fn(shape, |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) as f32 * 0.9).sin());
        let probe_l = Array4::from_shape_fn(shape, |(a, b, c, d)| ((a * 5 + b * 3 + c * 7 + d) as f32 * 0.4).cos());
        let mut grads = net.params().zeros_like();
        net.backward(&tf.cache, Some(&probe_g), Some(&probe_l), &mut grads).unwrap();

        let loss = |net: &BmlNetwork| -> f64 {
            let mut net = net.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let tf = net.forward_train(x.view(), ViewMask::BOTH, &mut rng).unwrap();
            let g = tf.global_map.unwrap();
            let l = tf.local_map.unwrap();
            g.iter().zip(probe_g.iter()).map(|(a, b)| (a * b) as f64).sum::<f64>()
                + l.iter().zip(probe_l.iter()).map(|(a, b)| (a * b) as f64).sum::<f64>()
        };
        // Max-pool and LeakyReLU are piecewise linear, so a step can cross a
        // kink; require broad agreement rather than every entry.
        let mut errs = Vec::new();
        for (ti, t) in net.params().tensors.iter().enumerate() {
            if t.name.starts_with("classifier") {
                continue;
            }
            for k in [0, t.data.len() / 2, t.data.len() - 1] {
                let eps = 2e-3f32;
                let mut plus = net.clone();
                plus.params_mut().tensors[ti].data[k] += eps;
                let mut minus = net.clone();
                minus.params_mut().tensors[ti].data[k] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
                let an = grads.get(ti)[k] as f64;
                errs.push((fd - an).abs() / (fd.abs().max(an.abs()).max(1.0)));
            }
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs.len() > 50);
        let median = errs[errs.len() / 2];
        let p80 = errs[errs.len() * 4 / 5];
        assert!(median < 1e-2, "median relative error {median}");
        assert!(p80 < 6e-2, "80th percentile relative error {p80}");
    }
}
