//! The image-to-twist residual network.
//!
//! Layout: a 3×3 stem (3→16), three stages of two residual blocks with
//! 16/32/64 channels (stages two and three open with a stride-2 block and a
//! 1×1 projection shortcut), then a 1×1 channel-reduction conv (64→8), a
//! flatten, `FC(→128) → ReLU → FC(→6)`. No normalization layers.
//!
//! Parameters live in one flat list of named tensors; layers refer to them
//! by index so that gradients, optimizer state and checkpoints share a
//! single ordering.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{
    conv_backward, conv_forward, linear_backward, linear_forward, relu_backward, relu_in_place,
    ConvGeometry, Scalar, Tensor,
};
use crate::error::NeuralError;
use crate::geometry::Twist;
use crate::sim::Image;

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const BLOCKS_PER_STAGE: usize = 2;
pub const REDUCED_CHANNELS: usize = 8;
pub const HIDDEN_UNITS: usize = 128;
pub const OUTPUTS: usize = 6;

#[derive(Clone, Debug)]
struct Conv {
    geom: ConvGeometry,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    projection: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct PolicyNet<T> {
    input_width: usize,
    input_height: usize,
    twist_scales: [f64; 6],
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stem: Conv,
    blocks: Vec<Block>,
    reduce: Conv,
    fc1: Linear,
    fc2: Linear,
}

struct Builder<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Builder<T> {
    fn tensor(&mut self, name: String, shape: &[usize]) -> usize {
        self.names.push(name);
        self.params.push(Tensor::zeros(shape));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, geom: ConvGeometry, out_channels: usize) -> Conv {
        let weight = self.tensor(
            format!("{name}.weight"),
            &[out_channels, geom.in_channels, geom.kernel, geom.kernel],
        );
        let bias = self.tensor(format!("{name}.bias"), &[out_channels]);
        Conv { geom, weight, bias }
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Linear {
        let weight = self.tensor(format!("{name}.weight"), &[outputs, inputs]);
        let bias = self.tensor(format!("{name}.bias"), &[outputs]);
        Linear { weight, bias }
    }
}

fn geometry(in_channels: usize, h: usize, w: usize, kernel: usize, stride: usize) -> ConvGeometry {
    ConvGeometry { in_channels, in_h: h, in_w: w, kernel, stride, pad: kernel / 2 }
}

struct BlockCache<T> {
    input: Vec<T>,
    cols1: Vec<T>,
    hidden: Vec<T>,
    cols2: Vec<T>,
    proj_cols: Vec<T>,
    output: Vec<T>,
}

/// Activations retained by a forward pass for the backward pass.
pub struct ForwardCache<T> {
    input: Vec<T>,
    stem_cols: Vec<T>,
    stem_out: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    reduce_cols: Vec<T>,
    flat: Vec<T>,
    hidden: Vec<T>,
    output: Vec<T>,
}

impl<T> ForwardCache<T> {
    /// Normalized network output.
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// Which ReLU units are active, in a fixed order. Two passes with equal
    /// patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let blocks = self.blocks.iter().flat_map(|b| b.hidden.iter().chain(&b.output));
        self.stem_out.iter().chain(blocks).chain(&self.hidden).map(|&v| v > T::zero()).collect()
    }
}

impl<T: Scalar> PolicyNet<T> {
    /// Network with every parameter set to zero.
    pub fn zeroed(input_width: usize, input_height: usize, twist_scales: [f64; 6]) -> Result<Self, NeuralError> {
        if input_width < 4 || input_height < 4 {
            return Err(NeuralError::Shape(format!(
                "input {input_width}x{input_height} is too small for two stride-2 stages"
            )));
        }
        if twist_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(NeuralError::Config(format!("twist scales must be positive: {twist_scales:?}")));
        }
        let mut b = Builder { names: Vec::new(), params: Vec::new() };
        let (mut h, mut w) = (input_height, input_width);
        let stem = b.conv("stem", geometry(3, h, w, 3, 1), STAGE_CHANNELS[0]);
        let mut channels = STAGE_CHANNELS[0];
        let mut blocks = Vec::new();
        for (s, &out_c) in STAGE_CHANNELS.iter().enumerate() {
            for i in 0..BLOCKS_PER_STAGE {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", s + 1, i);
                let g1 = geometry(channels, h, w, 3, stride);
                let conv1 = b.conv(&format!("{name}.conv1"), g1, out_c);
                let (oh, ow) = (g1.out_h(), g1.out_w());
                let conv2 = b.conv(&format!("{name}.conv2"), geometry(out_c, oh, ow, 3, 1), out_c);
                let projection = (stride != 1 || channels != out_c).then(|| {
                    b.conv(&format!("{name}.proj"), geometry(channels, h, w, 1, stride), out_c)
                });
                if let Some(p) = &projection {
                    assert_eq!((p.geom.out_h(), p.geom.out_w()), (oh, ow));
                }
                blocks.push(Block { conv1, conv2, projection });
                channels = out_c;
                (h, w) = (oh, ow);
            }
        }
        let reduce = b.conv("head.reduce", geometry(channels, h, w, 1, 1), REDUCED_CHANNELS);
        let flat = REDUCED_CHANNELS * h * w;
        let fc1 = b.linear("head.fc1", flat, HIDDEN_UNITS);
        let fc2 = b.linear("head.fc2", HIDDEN_UNITS, OUTPUTS);
        let net = PolicyNet {
            input_width,
            input_height,
            twist_scales,
            names: b.names,
            params: b.params,
            stem,
            blocks,
            reduce,
            fc1,
            fc2,
        };
        assert_eq!(net.params[net.fc1.weight].shape()[1], REDUCED_CHANNELS * h * w);
        Ok(net)
    }

    /// He-uniform initialization of all weights, zero biases.
    pub fn new(input_width: usize, input_height: usize, twist_scales: [f64; 6], seed: u64) -> Result<Self, NeuralError> {
        let mut net = Self::zeroed(input_width, input_height, twist_scales)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = p.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p.data_mut() {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.input_width, self.input_height)
    }

    pub fn twist_scales(&self) -> [f64; 6] {
        self.twist_scales
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zero tensors matching every parameter, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNet<U> {
        PolicyNet {
            input_width: self.input_width,
            input_height: self.input_height,
            twist_scales: self.twist_scales,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            reduce: self.reduce.clone(),
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        }
    }

    fn input_len(&self) -> usize {
        3 * self.input_width * self.input_height
    }

    fn run_conv(&self, conv: &Conv, input: &[T], cols: &mut Vec<T>) -> Vec<T> {
        conv_forward(
            &conv.geom,
            self.params[conv.weight].data(),
            self.params[conv.bias].data(),
            input,
            cols,
        )
    }

    /// Forward pass over one `[3, H, W]` input; returns the normalized
    /// 6-vector inside the cache.
    pub fn forward_cached(&self, input: &[T]) -> Result<ForwardCache<T>, NeuralError> {
        if input.len() != self.input_len() {
            return Err(NeuralError::Shape(format!(
                "expected {} input values for a {}x{} image, got {}",
                self.input_len(),
                self.input_width,
                self.input_height,
                input.len()
            )));
        }
        let mut stem_cols = Vec::new();
        let mut x = self.run_conv(&self.stem, input, &mut stem_cols);
        relu_in_place(&mut x);
        let stem_out = x.clone();

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut cols1 = Vec::new();
            let mut hidden = self.run_conv(&block.conv1, &x, &mut cols1);
            relu_in_place(&mut hidden);
            let mut cols2 = Vec::new();
            let mut out = self.run_conv(&block.conv2, &hidden, &mut cols2);
            let mut proj_cols = Vec::new();
            match &block.projection {
                Some(p) => {
                    let shortcut = self.run_conv(p, &x, &mut proj_cols);
                    out.iter_mut().zip(&shortcut).for_each(|(o, s)| *o += *s);
                }
                None => out.iter_mut().zip(&x).for_each(|(o, s)| *o += *s),
            }
            relu_in_place(&mut out);
            let input = std::mem::replace(&mut x, out.clone());
            blocks.push(BlockCache { input, cols1, hidden, cols2, proj_cols, output: out });
        }

        let mut reduce_cols = Vec::new();
        let flat = self.run_conv(&self.reduce, &x, &mut reduce_cols);
        let mut hidden = linear_forward(
            self.params[self.fc1.weight].data(),
            self.params[self.fc1.bias].data(),
            &flat,
        );
        relu_in_place(&mut hidden);
        let output = linear_forward(
            self.params[self.fc2.weight].data(),
            self.params[self.fc2.bias].data(),
            &hidden,
        );
        Ok(ForwardCache {
            input: input.to_vec(),
            stem_cols,
            stem_out,
            blocks,
            reduce_cols,
            flat,
            hidden,
            output,
        })
    }

    /// Normalized 6-vector for one input.
    pub fn predict(&self, input: &[T]) -> Result<[T; 6], NeuralError> {
        let cache = self.forward_cached(input)?;
        let mut out = [T::zero(); 6];
        out.copy_from_slice(&cache.output);
        Ok(out)
    }

    /// Accumulates parameter gradients of a scalar loss given `d loss /
    /// d output` for the cached forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_grad: &[T],
        grads: &mut [Tensor<T>],
    ) -> Result<(), NeuralError> {
        if output_grad.len() != OUTPUTS || grads.len() != self.params.len() {
            return Err(NeuralError::Shape("gradient buffers do not match the network".into()));
        }
        let mut hidden_grad = linear_backward_into(self, &self.fc2, &cache.hidden, output_grad, grads);
        relu_backward(&cache.hidden, &mut hidden_grad);
        let flat_grad = linear_backward_into(self, &self.fc1, &cache.flat, &hidden_grad, grads);
        let last = cache.blocks.last().map_or(&cache.stem_out, |b| &b.output);
        let mut x_grad = conv_backward_into(self, &self.reduce, last, &cache.reduce_cols, &flat_grad, grads, true)
            .expect("input gradient requested");

        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut y_grad = x_grad;
            relu_backward(&bc.output, &mut y_grad);
            let mut h_grad = conv_backward_into(self, &block.conv2, &bc.hidden, &bc.cols2, &y_grad, grads, true)
                .expect("input gradient requested");
            relu_backward(&bc.hidden, &mut h_grad);
            let mut in_grad = conv_backward_into(self, &block.conv1, &bc.input, &bc.cols1, &h_grad, grads, true)
                .expect("input gradient requested");
            match &block.projection {
                Some(p) => {
                    let s = conv_backward_into(self, p, &bc.input, &bc.proj_cols, &y_grad, grads, true)
                        .expect("input gradient requested");
                    in_grad.iter_mut().zip(&s).for_each(|(a, b)| *a += *b);
                }
                None => in_grad.iter_mut().zip(&y_grad).for_each(|(a, b)| *a += *b),
            }
            x_grad = in_grad;
        }
        relu_backward(&cache.stem_out, &mut x_grad);
        conv_backward_into(self, &self.stem, &cache.input, &cache.stem_cols, &x_grad, grads, false);
        Ok(())
    }
}

fn split_grads<T: Scalar>(grads: &mut [Tensor<T>], weight: usize, bias: usize) -> (&mut [T], &mut [T]) {
    assert!(weight < bias, "bias follows its weight");
    let (lo, hi) = grads.split_at_mut(bias);
    (lo[weight].data_mut(), hi[0].data_mut())
}

fn conv_backward_into<T: Scalar>(
    net: &PolicyNet<T>,
    conv: &Conv,
    input: &[T],
    cols: &[T],
    out_grad: &[T],
    grads: &mut [Tensor<T>],
    want_input_grad: bool,
) -> Option<Vec<T>> {
    let (wg, bg) = split_grads(grads, conv.weight, conv.bias);
    conv_backward(&conv.geom, net.params[conv.weight].data(), input, cols, out_grad, wg, bg, want_input_grad)
}

fn linear_backward_into<T: Scalar>(
    net: &PolicyNet<T>,
    layer: &Linear,
    x: &[T],
    y_grad: &[T],
    grads: &mut [Tensor<T>],
) -> Vec<T> {
    let (wg, bg) = split_grads(grads, layer.weight, layer.bias);
    linear_backward(net.params[layer.weight].data(), x, y_grad, wg, bg)
}

/// Converts interleaved 8-bit RGB into the network's planar input, centered
/// on zero.
pub fn input_from_rgb8<T: Scalar>(width: usize, height: usize, rgb: &[u8]) -> Vec<T> {
    let n = width * height;
    let mut out = vec![T::zero(); 3 * n];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = T::from_f64(px[c] as f64 / 255.0 - 0.5);
        }
    }
    out
}

impl PolicyNet<f32> {
    /// Image to end-effector twist. The image is quantized to 8 bits first,
    /// exactly like recorded training frames.
    pub fn forward(&self, image: &Image) -> Result<Twist, NeuralError> {
        if (image.width, image.height) != (self.input_width, self.input_height) {
            return Err(NeuralError::Shape(format!(
                "network expects {}x{} images, got {}x{}",
                self.input_width, self.input_height, image.width, image.height
            )));
        }
        let input = input_from_rgb8::<f32>(image.width, image.height, &image.to_rgb8());
        let out = self.predict(&input)?;
        let mut v = [0.0; 6];
        for i in 0..6 {
            v[i] = out[i] as f64 * self.twist_scales[i];
        }
        Ok(Twist::from_array(v, crate::geometry::Frame::EndEffector))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Pose, Rotation, Vec3};
    use crate::sim::{render, CameraIntrinsics, Scene};

    const SCALES: [f64; 6] = [0.25, 0.25, 0.25, 0.8, 0.8, 0.8];

    #[test]
    fn architecture_shapes() {
        let net = PolicyNet::<f32>::new(64, 64, SCALES, 1).unwrap();
        let names = net.names();
        assert_eq!(names.first().unwrap(), "stem.weight");
        assert!(names.contains(&"stage2.block0.proj.weight".to_string()));
        assert!(!names.contains(&"stage1.block0.proj.weight".to_string()));
        let idx = names.iter().position(|n| n == "head.fc1.weight").unwrap();
        assert_eq!(net.params()[idx].shape(), &[128, 8 * 16 * 16]);
        let small = PolicyNet::<f32>::new(16, 16, SCALES, 1).unwrap();
        assert_eq!(small.params()[idx].shape(), &[128, 8 * 4 * 4]);
        // only the first FC layer depends on the input size
        assert_eq!(
            net.parameter_count() - small.parameter_count(),
            128 * 8 * (16 * 16 - 4 * 4)
        );
        assert_eq!(net.parameter_count(), PolicyNet::<f32>::new(64, 64, SCALES, 99).unwrap().parameter_count());
    }

    #[test]
    fn zero_parameters_give_zero_twist() {
        let net = PolicyNet::<f32>::zeroed(64, 64, SCALES).unwrap();
        let scene = Scene::default();
        let pose = Pose::new(Vec3::new(0.5, 0.0, 0.4), Rotation::from_axis_angle(Vec3::X, 3.0).unwrap());
        let img = render(&scene, &pose, &CameraIntrinsics::default());
        assert_eq!(net.forward(&img).unwrap(), Twist::zero(Frame::EndEffector));
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let net = PolicyNet::<f32>::new(64, 64, SCALES, 7).unwrap();
        let scene = Scene::default();
        let pose = Pose::new(Vec3::new(0.6, 0.1, 0.45), Rotation::from_axis_angle(Vec3::X, 2.9).unwrap());
        let img = render(&scene, &pose, &CameraIntrinsics::default());
        let a = net.forward(&img).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, net.forward(&img).unwrap());
        assert_eq!(a.frame, Frame::EndEffector);
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let net = PolicyNet::<f32>::new(32, 32, SCALES, 7).unwrap();
        let img = Image::filled(64, 64, [0.5; 3]);
        assert!(matches!(net.forward(&img), Err(NeuralError::Shape(_))));
    }

    #[test]
    fn zeroed_second_conv_makes_block_identity() {
        let mut net = PolicyNet::<f64>::new(16, 16, SCALES, 3).unwrap();
        // stage1.block0 has no projection; zero its second conv
        for name in ["stage1.block0.conv2.weight", "stage1.block0.conv2.bias"] {
            let i = net.names().iter().position(|n| n == name).unwrap();
            net.params_mut()[i].fill_zero();
        }
        let input: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 13 % 29) as f64) / 29.0 - 0.4).collect();
        let cache = net.forward_cached(&input).unwrap();
        assert!(cache.stem_out.iter().all(|&v| v >= 0.0));
        assert_eq!(cache.blocks[0].output, cache.stem_out);
    }
}
