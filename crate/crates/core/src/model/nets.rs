//! Bowtie generator and DCGAN-style discriminator.

use super::layers::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Flatten, GradMode, LeakyRelu, Linear, Mode, Param, Sequential,
    Sigmoid, UnitNormalize,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::normal::DEFAULT_EPSILON;
use crate::rng::substream;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
const MAX_WIDTH_MULTIPLIER: usize = 8;

/// Smallest spatial extent allowed at the bottleneck.
pub const MIN_BOTTLENECK: usize = 2;

fn stage_width(base: usize, stage: usize) -> usize {
    base * (1usize << stage).min(MAX_WIDTH_MULTIPLIER)
}

/// Checks that `size` halves cleanly `depth` times and leaves at least a
/// [`MIN_BOTTLENECK`]-pixel bottleneck.
pub fn validate_spatial(size: usize, depth: usize) -> Result<()> {
    let factor = 1usize << depth;
    if depth == 0 || !size.is_multiple_of(factor) || size / factor < MIN_BOTTLENECK {
        return Err(Error::invalid(format!(
            "spatial size {size} is invalid for depth {depth}: need a multiple of {factor} that is at least {}",
            factor * MIN_BOTTLENECK
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// 4 with the mask channel, 3 without.
    pub input_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    /// U-Net style encoder-to-decoder concatenations. Off by default.
    pub skips: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            base_width: 64,
            depth: 4,
            skips: false,
        }
    }
}

/// Encoder of `depth` stride-2 conv blocks, decoder of `depth` stride-2
/// transposed-conv blocks, unit-normalized 3-channel output.
pub struct Generator<T> {
    config: GeneratorConfig,
    encoder: Vec<Sequential<T>>,
    decoder: Vec<Sequential<T>>,
    output: UnitNormalize<T>,
    /// Channel count of each encoder output, recorded for skip splitting.
    enc_widths: Vec<usize>,
    forward_done: bool,
}

impl<T: Scalar> Generator<T> {
    /// Builds the network with conv weights ~ N(0, 0.02), zero biases, unit
    /// batch-norm scale and zero shift.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.input_channels == 0 || config.base_width == 0 || config.depth == 0 {
            return Err(Error::invalid(format!("degenerate generator config {config:?}")));
        }
        let mut rng = substream(seed, &[0x6E6]);
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut enc_widths = Vec::with_capacity(d);
        let mut in_ch = config.input_channels;
        for i in 0..d {
            let out_ch = stage_width(config.base_width, i);
            let mut block = Sequential::new();
            let name = format!("gen.enc{i}");
            block.push(Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, KERNEL, STRIDE, PAD, i == 0, &mut rng));
            if i > 0 {
                block.push(BatchNorm2d::new(&format!("{name}.bn"), out_ch));
            }
            block.push(LeakyRelu::new(&format!("{name}.act"), LEAKY_SLOPE));
            encoder.push(block);
            enc_widths.push(out_ch);
            in_ch = out_ch;
        }
        let mut decoder = Vec::with_capacity(d);
        for j in 0..d {
            let last = j + 1 == d;
            let natural_in = enc_widths[d - 1 - j];
            let in_ch = if config.skips && j > 0 { 2 * natural_in } else { natural_in };
            let out_ch = if last { 3 } else { enc_widths[d - 2 - j] };
            let name = format!("gen.dec{j}");
            let mut block = Sequential::new();
            block.push(ConvTranspose2d::new(
                &format!("{name}.deconv"),
                in_ch,
                out_ch,
                KERNEL,
                STRIDE,
                PAD,
                last,
                &mut rng,
            ));
            if !last {
                block.push(BatchNorm2d::new(&format!("{name}.bn"), out_ch));
                block.push(LeakyRelu::new(&format!("{name}.act"), LEAKY_SLOPE));
            }
            decoder.push(block);
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            output: UnitNormalize::new("gen.unit_normalize", T::lit(f64::from(DEFAULT_EPSILON))),
            enc_widths,
            forward_done: false,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    /// `[N, C, S, S] -> [N, 3, S, S]` with unit-length pixel vectors.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        use super::layers::Module;
        let [_, c, h, w] = x.shape();
        if c != self.config.input_channels {
            return Err(Error::shape(format!("{} input channels", self.config.input_channels), c));
        }
        validate_spatial(h, self.config.depth)?;
        validate_spatial(w, self.config.depth)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x.clone();
        for block in &mut self.encoder {
            cur = block.forward(&cur, mode)?;
            if self.config.skips {
                skips.push(cur.clone());
            }
        }
        let d = self.config.depth;
        for (j, block) in self.decoder.iter_mut().enumerate() {
            if self.config.skips && j > 0 {
                cur = Tensor::concat_channels(&cur, &skips[d - 1 - j])?;
            }
            cur = block.forward(&cur, mode)?;
        }
        let out = self.output.forward(&cur, mode)?;
        self.forward_done = true;
        Ok(out)
    }

    /// Backpropagates `grad` (w.r.t. the output) and returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<T>, gm: GradMode) -> Result<Tensor<T>> {
        use super::layers::Module;
        if !self.forward_done {
            return Err(Error::NoForwardCache("generator".into()));
        }
        self.forward_done = false;
        let d = self.config.depth;
        let mut cur = self.output.backward(grad, gm)?;
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        for j in (0..d).rev() {
            cur = self.decoder[j].backward(&cur, gm)?;
            if self.config.skips && j > 0 {
                let level = d - 1 - j;
                let (main, skip) = cur.split_channels(self.enc_widths[level]);
                skip_grads[level] = Some(skip);
                cur = main;
            }
        }
        for i in (0..d).rev() {
            if let Some(s) = skip_grads[i].take() {
                cur.add_assign(&s);
            }
            cur = self.encoder[i].backward(&cur, gm)?;
        }
        Ok(cur)
    }

    /// All parameters and buffers in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| b.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|b| b.params_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub depth: usize,
    pub image_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            depth: 4,
            image_size: 64,
        }
    }
}

/// `depth` stride-2 conv blocks, flatten, affine to one logit, sigmoid.
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    net: Sequential<T>,
    forward_done: bool,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        validate_spatial(config.image_size, config.depth)?;
        if config.base_width == 0 {
            return Err(Error::invalid("discriminator base width must be positive"));
        }
        let mut rng = substream(seed, &[0xD15C]);
        let mut net = Sequential::new();
        let mut in_ch = 3;
        for i in 0..config.depth {
            let out_ch = stage_width(config.base_width, i);
            let name = format!("disc.block{i}");
            net.push(Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, KERNEL, STRIDE, PAD, i == 0, &mut rng));
            if i > 0 {
                net.push(BatchNorm2d::new(&format!("{name}.bn"), out_ch));
            }
            net.push(LeakyRelu::new(&format!("{name}.act"), LEAKY_SLOPE));
            in_ch = out_ch;
        }
        let side = config.image_size >> config.depth;
        net.push(Flatten::new("disc.flatten"));
        net.push(Linear::new("disc.head", in_ch * side * side, 1, &mut rng));
        net.push(Sigmoid::new("disc.sigmoid"));
        Ok(Self {
            config,
            net,
            forward_done: false,
        })
    }

    pub fn config(&self) -> DiscriminatorConfig {
        self.config
    }

    /// Probability of "real" per image, in `(0, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let [_, c, h, w] = x.shape();
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!("[N, 3, {s}, {s}]"), format!("{:?}", x.shape())));
        }
        let out = self.net.forward(x, mode)?;
        self.forward_done = true;
        Ok(out.into_data())
    }

    /// Backpropagates `d loss / d prob` and returns the image gradient.
    pub fn backward(&mut self, grad_probs: &[T], gm: GradMode) -> Result<Tensor<T>> {
        if !self.forward_done {
            return Err(Error::NoForwardCache("discriminator".into()));
        }
        self.forward_done = false;
        let g = Tensor::from_vec([grad_probs.len(), 1, 1, 1], grad_probs.to_vec())?;
        self.net.backward(&g, gm)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = substream(seed, &[]);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn spatial_validation() {
        assert!(validate_spatial(64, 4).is_ok());
        assert!(validate_spatial(8, 2).is_ok());
        assert!(validate_spatial(16, 4).is_err());
        assert!(validate_spatial(60, 4).is_err());
    }

    #[test]
    fn generator_output_is_unit_and_shape_preserving() {
        let cfg = GeneratorConfig {
            input_channels: 4,
            base_width: 8,
            depth: 3,
            skips: false,
        };
        let mut g = Generator::<f32>::new(cfg, 1).unwrap();
        let x = random_input([2, 4, 32, 32], 2);
        let y = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), [2, 3, 32, 32]);
        let plane = 32 * 32;
        for n in 0..2 {
            let s = y.sample(n);
            for p in 0..plane {
                let norm = (0..3).map(|c| s[c * plane + p].powi(2)).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn skip_variant_runs_forward_and_backward() {
        let cfg = GeneratorConfig {
            input_channels: 3,
            base_width: 4,
            depth: 2,
            skips: true,
        };
        let mut g = Generator::<f32>::new(cfg, 1).unwrap();
        let x = random_input([2, 3, 8, 8], 2);
        let y = g.forward(&x, Mode::Train).unwrap();
        let dx = g.backward(&y, GradMode::Accumulate).unwrap();
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut g = Generator::<f32>::new(
            GeneratorConfig {
                base_width: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let x = random_input([1, 4, 64, 64], 3);
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_rejects_wrong_channels() {
        let mut g = Generator::<f32>::new(
            GeneratorConfig {
                base_width: 4,
                depth: 2,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        assert!(g.forward(&random_input([1, 3, 8, 8], 1), Mode::Eval).is_err());
        assert!(g.backward(&random_input([1, 3, 8, 8], 1), GradMode::Accumulate).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let cfg = GeneratorConfig {
            input_channels: 4,
            base_width: 4,
            depth: 2,
            skips: false,
        };
        let mut g = Generator::<f64>::new(cfg, 1).unwrap();
        let x = random_input([2, 4, 8, 8], 3).cast::<f64>();
        let y = g.forward(&x, Mode::Train).unwrap();
        g.backward(&Tensor::zeros(y.shape()), GradMode::Accumulate).unwrap();
        for p in g.params() {
            assert!(p.grad.iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn fresh_discriminator_outputs_near_half() {
        let mut d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 11).unwrap();
        let x = random_input([32, 3, 64, 64], 4);
        let p = d.forward(&x, Mode::Train).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let mean = p.iter().sum::<f32>() / 32.0;
        assert!((0.35..=0.65).contains(&mean), "mean {mean}");
    }

    #[test]
    fn initialization_statistics() {
        let g = Generator::<f64>::new(GeneratorConfig::default(), 42).unwrap();
        let again = Generator::<f64>::new(GeneratorConfig::default(), 42).unwrap();
        let kernels: Vec<f64> = g
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".weight"))
            .flat_map(|p| p.value.iter().copied())
            .collect();
        assert!(kernels.len() >= 10_000);
        let mean = kernels.iter().sum::<f64>() / kernels.len() as f64;
        let std = (kernels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kernels.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "std {std}");
        for p in g.params() {
            if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
                assert!(p.value.iter().all(|&v| v == 0.0));
            }
            if p.name.ends_with(".gamma") {
                assert!(p.value.iter().all(|&v| v == 1.0));
            }
        }
        assert!(g.params().iter().zip(again.params()).all(|(a, b)| a.value == b.value));
    }
}
