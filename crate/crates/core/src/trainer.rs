//! Alternating generator/discriminator training, evaluation, checkpoints and
//! comparison panels.
//!
//! Every random draw is indexed by `(rng_seed, purpose, step, sample)`, so a
//! run is reproducible from its seed and resumable from any checkpoint.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::augment::{expand_dataset, AugmentParams};
use crate::data_io::{load_dataset, save_rgb_png, write_atomic};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_generator, angular_error_sum, discriminator_accuracy, discriminator_loss, psnr,
    reconstruction_loss_with_grad, ssim, to_unit_range, total_generator_loss, LossWeights, MetricReport,
    ReconstructionVariant, CSV_HEADER,
};
use crate::masking::{generate_mask, MaskSpec, MaskStyle};
use crate::model::nets::validate_spatial;
use crate::model::{
    Adam, AdamConfig, Checkpoint, Discriminator, DiscriminatorConfig, GradMode, Generator, GeneratorConfig, Mode,
    Tensor,
};
use crate::normal::{normal_to_rgb, ImageTensor, NormalMap, OcclusionMask, Rgb8Image, Vec3};
use crate::rng::{derive_seed, substream};
use crate::synth::{generate_dataset, SceneSpec};

const TAG_GEN: u64 = 1;
const TAG_DISC: u64 = 2;
const TAG_MASK: u64 = 3;
const TAG_EVAL_MASK: u64 = 4;
const TAG_SHUFFLE: u64 = 5;
const TAG_AUGMENT: u64 = 6;
const TAG_SYNTH: u64 = 7;
const TAG_HELDOUT: u64 = 8;

/// Number of recent discriminator accuracies averaged by the accuracy gate.
pub const GATE_WINDOW: usize = 10;
/// Panels written per evaluation.
pub const PANEL_IMAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    /// The discriminator is updated on steps where `step % period == 0`.
    pub disc_update_period: usize,
    /// Skip discriminator updates while its recent accuracy exceeds this value.
    pub disc_accuracy_gate: Option<f64>,
    pub use_mask_channel: bool,
    pub loss_weights: LossWeights,
    /// Mask parameters; its seed is replaced by per-step derived seeds.
    pub mask_spec: MaskSpec,
    pub eval_every: usize,
    pub panel_every: usize,
    pub rng_seed: u64,
    /// Stops after this many generator steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub base_width: usize,
    pub depth: usize,
    pub skips: bool,
    pub reconstruction: ReconstructionVariant,
    pub learning_rate: f64,
    /// Expand the training set to 4N with flips and rotation/zoom.
    pub augment: bool,
    /// Held-out images used for evaluation.
    pub eval_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            image_size: 64,
            disc_update_period: 1,
            disc_accuracy_gate: None,
            use_mask_channel: true,
            loss_weights: LossWeights::default(),
            mask_spec: MaskSpec::new(MaskStyle::IrregularLines, 0),
            eval_every: 1,
            panel_every: 5,
            rng_seed: 0,
            max_steps: None,
            base_width: 64,
            depth: 4,
            skips: false,
            reconstruction: ReconstructionVariant::PerPixel,
            learning_rate: AdamConfig::default().learning_rate,
            augment: true,
            eval_count: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("discriminator update period", self.disc_update_period),
            ("eval_every", self.eval_every),
            ("panel_every", self.panel_every),
            ("base width", self.base_width),
            ("depth", self.depth),
            ("eval count", self.eval_count),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max steps must be at least 1"));
        }
        if let Some(g) = self.disc_accuracy_gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("discriminator gate {g} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        validate_spatial(self.image_size, self.depth)?;
        self.loss_weights.validate()?;
        self.mask_spec.validate()
    }

    pub fn input_channels(&self) -> usize {
        if self.use_mask_channel {
            4
        } else {
            3
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            input_channels: self.input_channels(),
            base_width: self.base_width,
            depth: self.depth,
            skips: self.skips,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_width: self.base_width,
            depth: self.depth,
            image_size: self.image_size,
        }
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Mask spec used for sample `sample` of generator step `step`.
    pub fn step_mask_spec(&self, step: usize, sample: usize) -> MaskSpec {
        self.mask_spec
            .with_seed(derive_seed(self.rng_seed, &[TAG_MASK, step as u64, sample as u64]))
    }

    /// Evaluation masks depend only on the seed and the image index.
    pub fn eval_masks(&self, count: usize) -> Result<Vec<OcclusionMask>> {
        (0..count)
            .map(|i| {
                let spec = self
                    .mask_spec
                    .with_seed(derive_seed(self.rng_seed, &[TAG_EVAL_MASK, i as u64]));
                generate_mask(&spec, self.image_size, self.image_size)
            })
            .collect()
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("config.image_size", self.image_size);
        ck.set_meta("config.base_width", self.base_width);
        ck.set_meta("config.depth", self.depth);
        ck.set_meta("config.skips", self.skips);
        ck.set_meta("config.use_mask_channel", self.use_mask_channel);
        ck.set_meta("config.seed", self.rng_seed);
        ck.set_meta("config.batch_size", self.batch_size);
        ck.set_meta("config.mask_style", self.mask_spec.style);
        ck.set_meta("config.lambda_rec", self.loss_weights.lambda_reconstruction);
        ck.set_meta("config.lambda_adv", self.loss_weights.lambda_adversarial);
        ck.set_meta("config.disc_period", self.disc_update_period);
        ck.set_meta("config.reconstruction", self.reconstruction);
    }

    /// Overwrites the architecture and sampling fields stored in a checkpoint.
    pub fn apply_checkpoint_meta(&mut self, ck: &Checkpoint) -> Result<()> {
        fn get<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
            ck.require_meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        }
        self.image_size = get(ck, "config.image_size")?;
        self.base_width = get(ck, "config.base_width")?;
        self.depth = get(ck, "config.depth")?;
        self.skips = get(ck, "config.skips")?;
        self.use_mask_channel = get(ck, "config.use_mask_channel")?;
        self.rng_seed = get(ck, "config.seed")?;
        let style: MaskStyle = get(ck, "config.mask_style")?;
        self.mask_spec = MaskSpec::new(style, 0);
        Ok(())
    }

    fn check_architecture(&self, ck: &Checkpoint) -> Result<()> {
        let mut stored = self.clone();
        stored.apply_checkpoint_meta(ck)?;
        let arch = |c: &TrainConfig| (c.image_size, c.base_width, c.depth, c.skips, c.use_mask_channel);
        if arch(&stored) != arch(self) {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture (size, width, depth, skips, mask channel) {:?} differs from config {:?}",
                arch(&stored),
                arch(self)
            )));
        }
        Ok(())
    }
}

/// Scalars from one generator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub gen_loss: f64,
    pub rec_loss: f64,
    pub adv_loss: f64,
    /// Present when the discriminator was updated.
    pub disc_loss: Option<f64>,
    /// Present when the discriminator was updated or measured for the gate.
    pub disc_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LossSums {
    gen: f64,
    rec: f64,
    adv: f64,
    disc: f64,
    steps: usize,
    disc_steps: usize,
}

impl LossSums {
    fn add(&mut self, r: &StepReport) {
        self.gen += r.gen_loss;
        self.rec += r.rec_loss;
        self.adv += r.adv_loss;
        self.steps += 1;
        if let Some(d) = r.disc_loss {
            self.disc += d;
            self.disc_steps += 1;
        }
    }

    fn fill(&self, report: &mut MetricReport) {
        let n = self.steps as f64;
        report.gen_loss = self.gen / n;
        report.rec_loss = self.rec / n;
        report.adv_loss = self.adv / n;
        report.disc_loss = self.disc / self.disc_steps as f64;
    }
}

/// Output of [`Trainer::evaluate`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Loss fields are zero; [`run_training`] fills them from training averages.
    pub report: MetricReport,
    /// Mean angular error of a constant `(0, 0, 1)` fill over the same occluded pixels.
    pub baseline_angular_error: f64,
    pub masks: Vec<OcclusionMask>,
    pub predictions: Vec<NormalMap>,
}

/// Stacks maps into an `[N, 3, H, W]` tensor.
pub fn maps_to_tensor(maps: &[&NormalMap]) -> Result<Tensor<f32>> {
    let first = maps.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = vec![0.0f32; maps.len() * 3 * plane];
    for (i, m) in maps.iter().enumerate() {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::shape(format!("{w}x{h}"), format!("{}x{}", m.width(), m.height())));
        }
        let dst = &mut data[i * 3 * plane..][..3 * plane];
        for (p, v) in m.vectors().iter().enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = v[c];
            }
        }
    }
    Tensor::from_vec([maps.len(), 3, h, w], data)
}

/// Masked normals, plus the mask itself as a fourth channel when requested.
pub fn generator_input(maps: &[&NormalMap], masks: &[OcclusionMask], mask_channel: bool) -> Result<Tensor<f32>> {
    if maps.len() != masks.len() {
        return Err(Error::shape(maps.len(), masks.len()));
    }
    let targets = maps_to_tensor(maps)?;
    let [n, _, h, w] = targets.shape();
    let plane = h * w;
    let ch = if mask_channel { 4 } else { 3 };
    let mut data = vec![0.0f32; n * ch * plane];
    for (i, mask) in masks.iter().enumerate() {
        if (mask.width(), mask.height()) != (w, h) {
            return Err(Error::shape(
                format!("{w}x{h}"),
                format!("{}x{}", mask.width(), mask.height()),
            ));
        }
        let src = targets.sample(i);
        let dst = &mut data[i * ch * plane..][..ch * plane];
        for (p, &k) in mask.values().iter().enumerate() {
            let k = f32::from(k);
            for c in 0..3 {
                dst[c * plane + p] = src[c * plane + p] * k;
            }
            if mask_channel {
                dst[3 * plane + p] = k;
            }
        }
    }
    Tensor::from_vec([n, ch, h, w], data)
}

/// Splits generator output into per-image maps with no foreground split.
pub fn tensor_to_maps(t: &Tensor<f32>) -> Vec<NormalMap> {
    let [n, _, h, w] = t.shape();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let s = t.sample(i);
            let vectors = (0..plane).map(|p| [s[p], s[plane + p], s[2 * plane + p]]).collect();
            NormalMap::from_parts(w, h, vectors, None)
        })
        .collect()
}

fn check_same_size(a: &NormalMap, b: &NormalMap, mask: &OcclusionMask) -> Result<()> {
    let dims = (a.width(), a.height());
    for other in [(b.width(), b.height()), (mask.width(), mask.height())] {
        if other != dims {
            return Err(Error::shape(
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{}", other.0, other.1),
            ));
        }
    }
    Ok(())
}

/// `mask * target + (1 - mask) * predicted`. Known pixels keep the target's
/// foreground flag; occluded pixels count as foreground.
pub fn composite_map(target: &NormalMap, predicted: &NormalMap, mask: &OcclusionMask) -> Result<NormalMap> {
    check_same_size(target, predicted, mask)?;
    let fg = target.foreground_or_all();
    let (vectors, foreground): (Vec<Vec3>, Vec<bool>) = mask
        .values()
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            if k == 1 {
                (target.vectors()[i], fg[i])
            } else {
                (predicted.vectors()[i], true)
            }
        })
        .unzip();
    Ok(NormalMap::from_parts(target.width(), target.height(), vectors, Some(foreground)))
}

/// Four images side by side, no separators: target, masked input, raw
/// prediction, and the composite. Occluded pixels in the masked panel encode
/// the zero vector (mid-grey).
pub fn emit_panel(
    target: &NormalMap,
    masked: &ImageTensor,
    predicted: &NormalMap,
    mask: &OcclusionMask,
) -> Result<Rgb8Image> {
    check_same_size(target, predicted, mask)?;
    let (w, h) = (target.width(), target.height());
    if (masked.width, masked.height) != (w, h) || masked.channels < 3 {
        return Err(Error::shape(
            format!("{w}x{h}x3"),
            format!("{}x{}x{}", masked.width, masked.height, masked.channels),
        ));
    }
    let target_rgb = target.to_rgb();
    let masked_rgb: Vec<u8> = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            if mask.values()[i] == 1 {
                target_rgb.pixel(x, y)
            } else {
                let px = masked.pixel(x, y);
                normal_to_rgb([px[0], px[1], px[2]])
            }
        })
        .collect();
    let masked_rgb = Rgb8Image::new(w, h, masked_rgb)?;
    let pred_rgb = predicted.to_rgb();
    let comp_rgb = composite_map(target, predicted, mask)?.to_rgb();
    let mut data = Vec::with_capacity(4 * w * h * 3);
    for y in 0..h {
        for img in [&target_rgb, &masked_rgb, &pred_rgb, &comp_rgb] {
            data.extend_from_slice(&img.data[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Rgb8Image::new(4 * w, h, data)
}

/// Image metrics of predictions against targets. Angular errors are averaged
/// over all occluded pixels of all images.
pub fn score_predictions(
    targets: &[NormalMap],
    predictions: &[NormalMap],
    masks: &[OcclusionMask],
) -> Result<(f64, f64, f64, f64)> {
    if targets.is_empty() || targets.len() != predictions.len() || targets.len() != masks.len() {
        return Err(Error::invalid("evaluation needs equally many targets, predictions and masks"));
    }
    let (mut ssim_sum, mut psnr_sum) = (0.0, 0.0);
    let (mut err, mut base, mut count) = (0.0, 0.0, 0usize);
    for ((t, p), m) in targets.iter().zip(predictions).zip(masks) {
        check_same_size(t, p, m)?;
        let (ut, up) = (to_unit_range(&t.to_tensor()), to_unit_range(&p.to_tensor()));
        ssim_sum += ssim(&ut, &up)?;
        psnr_sum += psnr(&ut, &up)?;
        let occluded: Vec<bool> = m.values().iter().map(|&k| k == 0).collect();
        let (e, n) = angular_error_sum(p.vectors(), t.vectors(), &occluded);
        let flat = vec![[0.0, 0.0, 1.0]; t.vectors().len()];
        base += angular_error_sum(&flat, t.vectors(), &occluded).0;
        err += e;
        count += n;
    }
    let n = targets.len() as f64;
    let c = count.max(1) as f64;
    Ok((ssim_sum / n, psnr_sum / n, err / c, base / c))
}

/// Owns both networks and their optimizers.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    step: usize,
    gate_window: VecDeque<f64>,
    sums: LossSums,
    last_report_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config(), derive_seed(config.rng_seed, &[TAG_GEN]))?;
        let discriminator =
            Discriminator::new(config.discriminator_config(), derive_seed(config.rng_seed, &[TAG_DISC]))?;
        Ok(Self {
            gen_opt: Adam::new(config.adam_config()),
            disc_opt: Adam::new(config.adam_config()),
            config,
            generator,
            discriminator,
            step: 0,
            gate_window: VecDeque::new(),
            sums: LossSums::default(),
            last_report_epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Generator steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Epoch label of the most recent evaluation row.
    pub fn last_report_epoch(&self) -> usize {
        self.last_report_epoch
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.discriminator
    }

    fn gated(&self) -> bool {
        match self.config.disc_accuracy_gate {
            Some(g) if !self.gate_window.is_empty() => {
                self.gate_window.iter().sum::<f64>() / self.gate_window.len() as f64 > g
            }
            _ => false,
        }
    }

    fn record_accuracy(&mut self, acc: f64) {
        self.gate_window.push_back(acc);
        while self.gate_window.len() > GATE_WINDOW {
            self.gate_window.pop_front();
        }
    }

    /// One generator update, followed by a discriminator update when due.
    pub fn train_step(&mut self, batch: &[&NormalMap]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        let step = self.step;
        let size = self.config.image_size;
        let masks = (0..batch.len())
            .map(|j| generate_mask(&self.config.step_mask_spec(step, j), size, size))
            .collect::<Result<Vec<_>>>()?;
        let input = generator_input(batch, &masks, self.config.use_mask_channel)?;
        let real = maps_to_tensor(batch)?;
        let weights = self.config.loss_weights;

        self.generator.zero_grad();
        let fake = self.generator.forward(&input, Mode::Train)?;
        let (rec, rec_grad) = reconstruction_loss_with_grad(&real, &fake, self.config.reconstruction, None)?;
        let rec = f64::from(rec);
        let probs = self.discriminator.forward(&fake, Mode::Eval)?;
        let (adv, adv_prob_grad) = adversarial_loss_generator(&probs);
        let gen_loss = total_generator_loss(rec, adv, &weights);
        if !(gen_loss.is_finite() && rec.is_finite() && adv.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("generator loss {gen_loss} (reconstruction {rec}, adversarial {adv})"),
            });
        }
        let mut grad = rec_grad.map(|g| g * weights.lambda_reconstruction as f32);
        if weights.lambda_adversarial > 0.0 {
            let adv_grad = self.discriminator.backward(&adv_prob_grad, GradMode::InputOnly)?;
            grad.add_assign(&adv_grad.map(|g| g * weights.lambda_adversarial as f32));
        }
        self.generator.backward(&grad, GradMode::Accumulate)?;
        self.gen_opt.step(self.generator.params_mut())?;

        let mut disc_loss = None;
        let mut disc_acc = None;
        if step.is_multiple_of(self.config.disc_update_period) {
            if self.gated() {
                let pr = self.discriminator.forward(&real, Mode::Eval)?;
                let pf = self.discriminator.forward(&fake, Mode::Eval)?;
                disc_acc = Some(discriminator_accuracy(&pr, &pf)?);
            } else {
                self.discriminator.zero_grad();
                let pr = self.discriminator.forward(&real, Mode::Train)?;
                let (loss_r, grad_r, _) = discriminator_loss(&pr, &[]);
                self.discriminator.backward(&grad_r, GradMode::Accumulate)?;
                let pf = self.discriminator.forward(&fake, Mode::Train)?;
                let (loss_f, _, grad_f) = discriminator_loss(&[], &pf);
                self.discriminator.backward(&grad_f, GradMode::Accumulate)?;
                let loss = loss_r + loss_f;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("discriminator loss {loss}"),
                    });
                }
                self.disc_opt.step(self.discriminator.params_mut())?;
                disc_loss = Some(loss);
                disc_acc = Some(discriminator_accuracy(&pr, &pf)?);
            }
            if let Some(a) = disc_acc {
                self.record_accuracy(a);
            }
        }
        self.step += 1;
        let report = StepReport {
            step,
            gen_loss,
            rec_loss: rec,
            adv_loss: adv,
            disc_loss,
            disc_accuracy: disc_acc,
        };
        self.sums.add(&report);
        debug!("step {step}: {report:?}");
        Ok(report)
    }

    /// Eval-mode predictions for the given maps under the given masks.
    pub fn inpaint(&mut self, maps: &[&NormalMap], masks: &[OcclusionMask]) -> Result<Vec<NormalMap>> {
        let input = generator_input(maps, masks, self.config.use_mask_channel)?;
        let out = self.generator.forward(&input, Mode::Eval)?;
        if !out.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: "generator produced non-finite output".into(),
            });
        }
        Ok(tensor_to_maps(&out))
    }

    /// Metrics on a held-out set with fixed masks.
    pub fn evaluate(&mut self, eval_set: &[NormalMap]) -> Result<Evaluation> {
        if eval_set.is_empty() {
            return Err(Error::invalid("evaluation set is empty"));
        }
        let masks = self.config.eval_masks(eval_set.len())?;
        let mut predictions = Vec::with_capacity(eval_set.len());
        let (mut real_probs, mut fake_probs) = (Vec::new(), Vec::new());
        for (chunk, chunk_masks) in eval_set
            .chunks(self.config.batch_size)
            .zip(masks.chunks(self.config.batch_size))
        {
            let refs: Vec<&NormalMap> = chunk.iter().collect();
            let preds = self.inpaint(&refs, chunk_masks)?;
            let pred_refs: Vec<&NormalMap> = preds.iter().collect();
            real_probs.extend(self.discriminator.forward(&maps_to_tensor(&refs)?, Mode::Eval)?);
            fake_probs.extend(self.discriminator.forward(&maps_to_tensor(&pred_refs)?, Mode::Eval)?);
            predictions.extend(preds);
        }
        let (ssim, psnr, mae, baseline) = score_predictions(eval_set, &predictions, &masks)?;
        let report = MetricReport {
            ssim,
            psnr,
            disc_accuracy: discriminator_accuracy(&real_probs, &fake_probs)?,
            mean_angular_error: mae,
            ..MetricReport::default()
        };
        Ok(Evaluation {
            report,
            baseline_angular_error: baseline,
            masks,
            predictions,
        })
    }

    fn take_sums(&mut self) -> LossSums {
        std::mem::take(&mut self.sums)
    }

    /// Full training state: networks, optimizers, counters and pending loss sums.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.config.write_meta(&mut ck);
        ck.set_meta("trainer.step", self.step);
        ck.set_meta("trainer.last_report_epoch", self.last_report_epoch);
        let window: Vec<String> = self.gate_window.iter().map(f64::to_string).collect();
        ck.set_meta("trainer.gate_window", window.join(","));
        let s = &self.sums;
        ck.set_meta("sums.gen", s.gen);
        ck.set_meta("sums.rec", s.rec);
        ck.set_meta("sums.adv", s.adv);
        ck.set_meta("sums.disc", s.disc);
        ck.set_meta("sums.steps", s.steps);
        ck.set_meta("sums.disc_steps", s.disc_steps);
        ck.push_params(&self.generator.params());
        ck.push_params(&self.discriminator.params());
        ck.push_adam("opt.gen", &self.gen_opt);
        ck.push_adam("opt.disc", &self.disc_opt);
        ck
    }

    /// Rebuilds a trainer from `config` and a checkpoint taken with the same architecture.
    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        config.check_architecture(ck)?;
        let mut t = Self::new(config)?;
        fn num<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
            ck.require_meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        }
        ck.restore_params(t.generator.params_mut())?;
        ck.restore_params(t.discriminator.params_mut())?;
        let trainable = |ps: Vec<&crate::model::Param<f32>>| -> Vec<String> {
            ps.into_iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
        };
        t.gen_opt = ck.restore_adam("opt.gen", &trainable(t.generator.params()))?;
        t.disc_opt = ck.restore_adam("opt.disc", &trainable(t.discriminator.params()))?;
        t.step = num(ck, "trainer.step")?;
        t.last_report_epoch = num(ck, "trainer.last_report_epoch")?;
        let window = ck.require_meta("trainer.gate_window")?;
        t.gate_window = window
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad gate window".into())))
            .collect::<Result<_>>()?;
        t.sums = LossSums {
            gen: num(ck, "sums.gen")?,
            rec: num(ck, "sums.rec")?,
            adv: num(ck, "sums.adv")?,
            disc: num(ck, "sums.disc")?,
            steps: num(ck, "sums.steps")?,
            disc_steps: num(ck, "sums.disc_steps")?,
        };
        Ok(t)
    }

    /// Loads a checkpoint, taking architecture fields from its metadata.
    pub fn load(path: &Path, mut config: TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        config.apply_checkpoint_meta(&ck)?;
        Self::from_checkpoint(config, &ck)
    }
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Face-like analytic scenes; a separate held-out set is generated for evaluation.
    Synthetic { count: usize },
    /// `<root>/train`; evaluation uses `<root>/test` when present, else the first training images.
    Directory(PathBuf),
}

/// Training maps (before augmentation) and the held-out evaluation maps.
pub fn prepare_data(config: &TrainConfig, source: &DataSource) -> Result<(Vec<NormalMap>, Vec<NormalMap>)> {
    let size = config.image_size;
    match source {
        DataSource::Synthetic { count } => {
            let train = generate_dataset(*count, &SceneSpec::face_like(size, derive_seed(config.rng_seed, &[TAG_SYNTH])))?;
            let held_out = SceneSpec::face_like(size, derive_seed(config.rng_seed, &[TAG_HELDOUT]));
            let eval = generate_dataset(config.eval_count, &held_out)?;
            Ok((train, eval))
        }
        DataSource::Directory(root) => {
            let train = load_dataset(root, "train", size)?;
            let eval = if root.join("test").is_dir() {
                load_dataset(root, "test", size)?
            } else {
                train.clone()
            };
            let eval = eval.into_iter().take(config.eval_count).collect();
            Ok((train, eval))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// One row per evaluation, as written to `metrics.csv`.
    pub reports: Vec<MetricReport>,
    pub steps: Vec<StepReport>,
    /// Baseline error of the last evaluation.
    pub baseline_angular_error: f64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub csv_path: PathBuf,
}

pub const CSV_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn read_csv_prefix(path: &Path, keep_through_epoch: usize) -> Result<Vec<String>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= keep_through_epoch)
        })
        .map(str::to_string)
        .collect())
}

/// Runs the full pipeline into `out_dir`: data, augmentation, training,
/// evaluation rows in `metrics.csv`, panels under `panels/` and checkpoints
/// under `checkpoints/`. With `resume`, training continues from that
/// checkpoint and CSV rows after its last evaluation are rewritten.
pub fn run_training(
    config: &TrainConfig,
    source: &DataSource,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    let (train, eval) = prepare_data(config, source)?;
    let train = if config.augment {
        let params = AugmentParams {
            rng_seed: derive_seed(config.rng_seed, &[TAG_AUGMENT]),
            ..AugmentParams::default()
        };
        expand_dataset(&train, &params)?
    } else {
        train
    };
    info!("training on {} maps, evaluating on {}", train.len(), eval.len());

    let ck_dir = out_dir.join("checkpoints");
    let panel_dir = out_dir.join("panels");
    for d in [out_dir, &ck_dir, &panel_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let csv_path = out_dir.join(CSV_FILE);

    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(config.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(config.clone())?,
    };
    let mut rows = if resume.is_some() {
        read_csv_prefix(&csv_path, trainer.last_report_epoch)?
    } else {
        Vec::new()
    };

    let spe = train.len().div_ceil(config.batch_size);
    let total = (config.epochs * spe).min(config.max_steps.unwrap_or(usize::MAX));
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut summary = TrainSummary {
        reports: Vec::new(),
        steps: Vec::new(),
        baseline_angular_error: f64::NAN,
        checkpoints: Vec::new(),
        final_checkpoint: ck_dir.join(FINAL_CHECKPOINT),
        csv_path: csv_path.clone(),
    };

    while trainer.step < total {
        let epoch = trainer.step / spe;
        if epoch != order_epoch {
            order = (0..train.len()).collect();
            order.shuffle(&mut substream(config.rng_seed, &[TAG_SHUFFLE, epoch as u64]));
            order_epoch = epoch;
        }
        let b = trainer.step % spe;
        let batch: Vec<&NormalMap> = order[b * config.batch_size..((b + 1) * config.batch_size).min(train.len())]
            .iter()
            .map(|&i| &train[i])
            .collect();
        summary.steps.push(trainer.train_step(&batch)?);

        let epoch_done = trainer.step % spe == 0;
        let last = trainer.step == total;
        let label = epoch + 1;
        if (epoch_done && label % config.eval_every == 0) || last {
            let ev = trainer.evaluate(&eval)?;
            let mut report = ev.report;
            report.epoch = label;
            trainer.take_sums().fill(&mut report);
            trainer.last_report_epoch = label;
            rows.push(report.csv_row());
            let mut text = format!("{CSV_HEADER}\n");
            for r in &rows {
                text.push_str(r);
                text.push('\n');
            }
            write_atomic(&csv_path, text.as_bytes())?;
            info!("epoch {label} step {}: {}", trainer.step, report.csv_row());
            summary.reports.push(report);
            summary.baseline_angular_error = ev.baseline_angular_error;

            if (epoch_done && label % config.panel_every == 0) || last {
                for (i, t) in eval.iter().enumerate().take(PANEL_IMAGES) {
                    let masked = crate::masking::apply_mask(t, &ev.masks[i])?;
                    let panel = emit_panel(t, &masked, &ev.predictions[i], &ev.masks[i])?;
                    save_rgb_png(&panel, &panel_dir.join(format!("epoch_{label:04}_{i}.png")))?;
                }
            }
            let ck = trainer.checkpoint();
            let path = ck_dir.join(format!("step_{:06}.ckpt", trainer.step));
            ck.save(&path)?;
            summary.checkpoints.push(path);
            if last {
                ck.save(&summary.final_checkpoint)?;
            }
        }
    }
    if !summary.final_checkpoint.exists() {
        trainer.checkpoint().save(&summary.final_checkpoint)?;
    }
    Ok(summary)
}
