//! Finite-difference machinery shared by the integration tests.
#![allow(dead_code)]

use normfill::losses::{adversarial_loss_generator, discriminator_loss, reconstruction_loss_with_grad};
use normfill::model::layers::{Module, UnitNormalize};
use normfill::model::{
    Discriminator, DiscriminatorConfig, GradMode, Generator, GeneratorConfig, Mode, Param, Scalar, Tensor,
};
use normfill::rng::substream;
use normfill::ReconstructionVariant;
use rand::Rng;
use rand_distr::StandardNormal;

/// `|a - n| / max(|a|, |n|)` over a whole tensor.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

pub fn random_tensor<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = substream(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random field of unit 3-vectors, `[N, 3, H, W]`.
pub fn random_unit_field<T: Scalar>(n: usize, size: usize, seed: u64) -> Tensor<T> {
    let raw = random_tensor::<f64>([n, 3, size, size], seed);
    let plane = size * size;
    let mut out = raw.clone();
    for i in 0..n {
        for p in 0..plane {
            let norm = (0..3).map(|c| raw.sample(i)[c * plane + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                out.data_mut()[(i * 3 + c) * plane + p] /= norm;
            }
        }
    }
    out.cast()
}

/// Central differences of `loss` with respect to every element of `x`.
fn numeric_input_grad<T: Scalar>(x: &Tensor<T>, h: f64, mut loss: impl FnMut(&Tensor<T>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.data().len())
        .map(|k| {
            let orig = x.data()[k];
            let up = orig + T::lit(h);
            let down = orig - T::lit(h);
            probe.data_mut()[k] = up;
            let lp = loss(&probe);
            probe.data_mut()[k] = down;
            let lm = loss(&probe);
            probe.data_mut()[k] = orig;
            (lp - lm) / (up - down).to_f64().unwrap()
        })
        .collect()
}

/// Relative error of the unit-normalize layer's input gradient under a random linear readout.
pub fn unit_normalize_check<T: Scalar>(h: f64, seed: u64) -> f64 {
    let x = random_tensor::<T>([2, 3, 8, 8], seed);
    let w = random_tensor::<T>([2, 3, 8, 8], seed + 1);
    let eps = T::lit(1e-8);
    let mut layer = UnitNormalize::new("u", eps);
    let readout = |y: &Tensor<T>| -> f64 {
        y.data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum()
    };
    layer.forward(&x, Mode::Train).unwrap();
    let analytic = layer.backward(&w, GradMode::Accumulate).unwrap();
    let numeric = numeric_input_grad(&x, h, |p| readout(&layer.forward(p, Mode::Train).unwrap()));
    rel_error(&to_f64(analytic.data()), &numeric)
}

/// Relative error of the reconstruction-loss gradient with respect to the generated field.
pub fn reconstruction_check<T: Scalar>(variant: ReconstructionVariant, h: f64, seed: u64) -> f64 {
    let target = random_unit_field::<T>(2, 8, seed);
    let generated = random_tensor::<T>([2, 3, 8, 8], seed + 1);
    let loss = |g: &Tensor<T>| {
        reconstruction_loss_with_grad(&target, g, variant, None)
            .unwrap()
            .0
            .to_f64()
            .unwrap()
    };
    let (_, analytic) = reconstruction_loss_with_grad(&target, &generated, variant, None).unwrap();
    let numeric = numeric_input_grad(&generated, h, loss);
    rel_error(&to_f64(analytic.data()), &numeric)
}

/// Relative errors of the input gradient and of every parameter gradient of
/// one layer in training mode, under a random linear readout of its output.
pub fn layer_check<T: Scalar>(layer: &mut dyn Module<T>, x: &Tensor<T>, h: f64, seed: u64) -> Vec<(String, f64)> {
    let y = layer.forward(x, Mode::Train).unwrap();
    let w = random_tensor::<T>(y.shape(), seed);
    let readout = |y: &Tensor<T>| -> f64 {
        y.data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum()
    };
    layer.params_mut().into_iter().for_each(Param::zero_grad);
    let dx = layer.backward(&w, GradMode::Accumulate).unwrap();
    let numeric = numeric_input_grad(x, h, |p| readout(&layer.forward(p, Mode::Train).unwrap()));
    let mut out = vec![(format!("{} input", layer.name()), rel_error(&to_f64(dx.data()), &numeric))];
    let grads: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), to_f64(&p.grad)))
        .collect();
    for (k, (name, grad)) in grads.into_iter().enumerate() {
        let numeric: Vec<f64> = (0..grad.len())
            .map(|j| {
                let orig = layer.params_mut().into_iter().filter(|p| p.trainable).nth(k).unwrap().value[j];
                let mut eval = |v: T| {
                    layer.params_mut().into_iter().filter(|p| p.trainable).nth(k).unwrap().value[j] = v;
                    readout(&layer.forward(x, Mode::Train).unwrap())
                };
                let (up, down) = (orig + T::lit(h), orig - T::lit(h));
                let d = (eval(up) - eval(down)) / (up - down).to_f64().unwrap();
                eval(orig);
                d
            })
            .collect();
        out.push((name, rel_error(&grad, &numeric)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruction plus adversarial loss, through the discriminator.
    Generator,
    /// Cross-entropy of the discriminator on a real and a fixed fake batch.
    Discriminator,
}

/// A depth-2, width-8 generator and discriminator at their default
/// initialization on a batch of 8x8 inputs, both in training mode.
pub struct GanFixture<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub real: Tensor<T>,
    /// Generator output at construction, used as the detached fake batch.
    pub fake: Tensor<T>,
}

pub const FIXTURE_SIZE: usize = 8;
/// Relative disagreement between coarse and fine f64 differences that marks
/// a probe whose bracket straddles a kink.
pub const KINK_TOLERANCE: f64 = 1e-3;

fn gen_config() -> GeneratorConfig {
    GeneratorConfig {
        input_channels: 4,
        base_width: 8,
        depth: 2,
        skips: false,
    }
}

fn disc_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        base_width: 8,
        depth: 2,
        image_size: FIXTURE_SIZE,
    }
}

impl<T: Scalar> GanFixture<T> {
    pub fn new(seed: u64) -> Self {
        let (n, s) = (4, FIXTURE_SIZE);
        let mut gen = Generator::new(gen_config(), seed).unwrap();
        let disc = Discriminator::new(disc_config(), seed + 1).unwrap();
        let input = random_tensor([n, 4, s, s], seed + 2);
        let fake = gen.forward(&input, Mode::Train).unwrap();
        Self {
            gen,
            disc,
            input,
            target: random_unit_field(n, s, seed + 3),
            real: random_unit_field(n, s, seed + 4),
            fake,
        }
    }

    /// The same networks and data in another precision.
    pub fn convert<U: Scalar>(&self) -> GanFixture<U> {
        let mut gen = Generator::new(gen_config(), 0).unwrap();
        let mut disc = Discriminator::new(disc_config(), 0).unwrap();
        for (dst, src) in gen.params_mut().into_iter().zip(self.gen.params()) {
            dst.value = src.value.iter().map(|v| U::lit(v.to_f64().unwrap())).collect();
        }
        for (dst, src) in disc.params_mut().into_iter().zip(self.disc.params()) {
            dst.value = src.value.iter().map(|v| U::lit(v.to_f64().unwrap())).collect();
        }
        GanFixture {
            gen,
            disc,
            input: self.input.cast(),
            target: self.target.cast(),
            real: self.real.cast(),
            fake: self.fake.cast(),
        }
    }

    pub fn objective(&mut self, which: Objective) -> f64 {
        match which {
            Objective::Generator => {
                let out = self.gen.forward(&self.input, Mode::Train).unwrap();
                let rec = reconstruction_loss_with_grad(
                    &self.target.cast::<f64>(),
                    &out.cast::<f64>(),
                    ReconstructionVariant::PerPixel,
                    None,
                )
                .unwrap()
                .0;
                let probs = self.disc.forward(&out, Mode::Train).unwrap();
                rec + adversarial_loss_generator(&probs).0
            }
            Objective::Discriminator => {
                let real = self.disc.forward(&self.real, Mode::Train).unwrap();
                let fake = self.disc.forward(&self.fake, Mode::Train).unwrap();
                discriminator_loss(&real, &fake).0
            }
        }
    }

    /// Leaves the analytic gradients of `which` in the parameters.
    pub fn backprop(&mut self, which: Objective) {
        self.gen.zero_grad();
        self.disc.zero_grad();
        match which {
            Objective::Generator => {
                let out = self.gen.forward(&self.input, Mode::Train).unwrap();
                let (_, rec_grad) = reconstruction_loss_with_grad(
                    &self.target.cast::<f64>(),
                    &out.cast::<f64>(),
                    ReconstructionVariant::PerPixel,
                    None,
                )
                .unwrap();
                let probs = self.disc.forward(&out, Mode::Train).unwrap();
                let (_, dprobs) = adversarial_loss_generator(&probs);
                let mut grad = self.disc.backward(&dprobs, GradMode::Accumulate).unwrap();
                grad.add_assign(&rec_grad.cast());
                self.gen.backward(&grad, GradMode::Accumulate).unwrap();
            }
            Objective::Discriminator => {
                let real = self.disc.forward(&self.real, Mode::Train).unwrap();
                let (_, dreal, _) = discriminator_loss(&real, &[] as &[T]);
                self.disc.backward(&dreal, GradMode::Accumulate).unwrap();
                let fake = self.disc.forward(&self.fake, Mode::Train).unwrap();
                let (_, _, dfake) = discriminator_loss(&[] as &[T], &fake);
                self.disc.backward(&dfake, GradMode::Accumulate).unwrap();
            }
        }
    }

    fn param(&mut self, net: Net, k: usize) -> &mut Param<T> {
        let params = match net {
            Net::Generator => self.gen.params_mut(),
            Net::Discriminator => self.disc.params_mut(),
        };
        params.into_iter().nth(k).unwrap()
    }

    /// Index, name and stored gradient of every trainable tensor of `net`.
    pub fn analytic(&self, net: Net) -> Vec<(usize, String, Vec<f64>)> {
        let params = match net {
            Net::Generator => self.gen.params(),
            Net::Discriminator => self.disc.params(),
        };
        params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k, p.name.clone(), to_f64(&p.grad)))
            .collect()
    }

    /// Central differences of `which` for every trainable element of `net`,
    /// in the order of [`GanFixture::analytic`].
    pub fn numeric(&mut self, net: Net, h: f64, which: Objective) -> Vec<Vec<f64>> {
        let tensors: Vec<(usize, usize)> = self.analytic(net).iter().map(|(k, _, g)| (*k, g.len())).collect();
        tensors
            .into_iter()
            .map(|(k, len)| {
                (0..len)
                    .map(|j| {
                        let orig = self.param(net, k).value[j];
                        let (up, down) = (orig + T::lit(h), orig - T::lit(h));
                        self.param(net, k).value[j] = up;
                        let lp = self.objective(which);
                        self.param(net, k).value[j] = down;
                        let lm = self.objective(which);
                        self.param(net, k).value[j] = orig;
                        (lp - lm) / (up - down).to_f64().unwrap()
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// Relative error over the probes that do not straddle a kink.
    pub error: f64,
    /// Relative error over all probes.
    pub raw_error: f64,
    pub excluded: usize,
    pub len: usize,
}

const CASES: [(Objective, Net, &str); 3] = [
    (Objective::Generator, Net::Generator, ""),
    (Objective::Generator, Net::Discriminator, " (via generator loss)"),
    (Objective::Discriminator, Net::Discriminator, ""),
];

/// Every trainable tensor of both networks under both objectives, without
/// kink screening.
pub fn gan_check<T: Scalar>(h: f64, seed: u64) -> Vec<TensorCheck> {
    let mut fx = GanFixture::<T>::new(seed);
    let mut out = Vec::new();
    for (which, net, label) in CASES {
        fx.backprop(which);
        let analytic = fx.analytic(net);
        let numeric = fx.numeric(net, h, which);
        for ((_, name, grad), num) in analytic.into_iter().zip(numeric) {
            let e = rel_error(&grad, &num);
            out.push(TensorCheck {
                name: format!("{name}{label}"),
                error: e,
                raw_error: e,
                excluded: 0,
                len: grad.len(),
            });
        }
    }
    out
}

/// Like [`gan_check`], but probes whose `[-h, h]` bracket contains a
/// non-differentiable point (a leaky-ReLU input crossing zero) are left
/// out. They are found on an f64 copy of the fixture, by comparing central
/// differences at `h` and `h / 100`; the analytic gradient plays no part.
pub fn gan_check_screened<T: Scalar>(h: f64, seed: u64) -> Vec<TensorCheck> {
    let mut fx = GanFixture::<T>::new(seed);
    let mut wide: GanFixture<f64> = fx.convert();
    let mut out = Vec::new();
    for (which, net, label) in CASES {
        fx.backprop(which);
        let analytic = fx.analytic(net);
        let numeric = fx.numeric(net, h, which);
        let coarse = wide.numeric(net, h, which);
        let fine = wide.numeric(net, h / 100.0, which);
        for ((((_, name, grad), num), c), f) in analytic.into_iter().zip(numeric).zip(coarse).zip(fine) {
            let rms = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
            let smooth: Vec<bool> = c
                .iter()
                .zip(&f)
                .map(|(c, f)| (c - f).abs() <= KINK_TOLERANCE * f.abs().max(rms))
                .collect();
            let keep = |v: &[f64]| -> Vec<f64> {
                v.iter().zip(&smooth).filter(|(_, &s)| s).map(|(x, _)| *x).collect()
            };
            out.push(TensorCheck {
                name: format!("{name}{label}"),
                error: rel_error(&keep(&grad), &keep(&num)),
                raw_error: rel_error(&grad, &num),
                excluded: smooth.iter().filter(|&&s| !s).count(),
                len: grad.len(),
            });
        }
    }
    out
}
