//! Adversarial diffusion translator: a diffusive module per modality plus a
//! cycle-consistent non-diffusive module that supplies the conditioning source
//! during unpaired training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cyclegan::{cycle_losses, cycle_step, CycleLosses, CycleNets, NetSizes};
use crate::diffusion::{reverse_loop, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Adam, ConvNetSpec, DiscriminatorNet, GeneratorNet, Graph, Tensor};
use crate::training::{
    batch_indices, batch_tensor, epoch_orders, image_tensor, lsgan_gen_loss, stack_channels, tensor_image,
    update_discriminator, EpochStats, EpochStreams, StatsAccumulator, TrainConfig, UnpairedPools,
};

/// Architecture of a full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynDiffSizes {
    pub diffusive: NetSizes,
    pub time_embed_dim: usize,
    pub translator: NetSizes,
}

impl Default for SynDiffSizes {
    fn default() -> Self {
        Self { diffusive: NetSizes::default(), time_embed_dim: 128, translator: NetSizes::default() }
    }
}

/// Networks that produce one target modality.
///
/// `diff_gen` maps `(x_t, source)` to a clean estimate, `diff_disc` scores
/// `(x_t, x_{t-k})` tuples, `nd_gen` translates the other modality into this
/// one and `nd_disc` judges real against translated images.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBranch {
    pub diff_gen: GeneratorNet,
    pub diff_disc: DiscriminatorNet,
    pub nd_gen: GeneratorNet,
    pub nd_disc: DiscriminatorNet,
}

impl ModalityBranch {
    fn new(sizes: &SynDiffSizes, seed: u64) -> Result<Self> {
        let d = sizes.diffusive;
        let t = sizes.translator;
        let s = |i: u64| seed.wrapping_mul(131).wrapping_add(i);
        Ok(Self {
            diff_gen: GeneratorNet::new(
                ConvNetSpec::generator(d.gen_base, d.gen_depth, sizes.time_embed_dim, 2),
                s(1),
            )?,
            diff_disc: DiscriminatorNet::new(ConvNetSpec::discriminator(d.disc_base, d.disc_depth, 2), s(2))?,
            nd_gen: GeneratorNet::new(ConvNetSpec::generator(t.gen_base, t.gen_depth, 0, 1), s(3))?,
            nd_disc: DiscriminatorNet::new(ConvNetSpec::discriminator(t.disc_base, t.disc_depth, 1), s(4))?,
        })
    }

    fn param_lens(&self) -> [usize; 4] {
        [self.diff_gen.params.len(), self.diff_disc.params.len(), self.nd_gen.params.len(), self.nd_disc.params.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.diff_gen.params.all_finite()
            && self.diff_disc.params.all_finite()
            && self.nd_gen.params.all_finite()
            && self.nd_disc.params.all_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynDiffModel {
    pub schedule: NoiseSchedule,
    /// Target PET (`x`), conditioned on MRI.
    pub pet: ModalityBranch,
    /// Target MRI (`y`), conditioned on PET.
    pub mri: ModalityBranch,
    pub lambda_cycle: f64,
    pub lambda_rec: f64,
}

impl SynDiffModel {
    pub fn new(sizes: SynDiffSizes, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        Ok(Self {
            schedule,
            pet: ModalityBranch::new(&sizes, seed.wrapping_mul(2))?,
            mri: ModalityBranch::new(&sizes, seed.wrapping_mul(2).wrapping_add(1))?,
            lambda_cycle: 10.0,
            lambda_rec: 1.0,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.pet.all_finite() && self.mri.all_finite()
    }

    pub fn size_multiple(&self) -> usize {
        [&self.pet.diff_gen.spec, &self.pet.diff_disc.spec, &self.pet.nd_gen.spec, &self.pet.nd_disc.spec]
            .iter()
            .map(|s| s.size_multiple())
            .max()
            .unwrap()
    }
}

/// Clean-target estimate `G(x_t, t, y)` in working range. Both inputs are working range.
pub fn gen_forward(g: &GeneratorNet, x_t: &Image, t: usize, y: &Image) -> Result<Image> {
    x_t.ensure_same_shape(y, "gen_forward")?;
    let input = stack_channels(&image_tensor(x_t), &image_tensor(y));
    Ok(tensor_image(&g.infer(input, &[t as f64]), 0))
}

/// Patch scores for the tuple `(x_t, candidate)`.
pub fn disc_forward(d: &DiscriminatorNet, x_t: &Image, candidate: &Image) -> Result<Image> {
    x_t.ensure_same_shape(candidate, "disc_forward")?;
    let input = stack_channels(&image_tensor(x_t), &image_tensor(candidate));
    Ok(tensor_image(&d.infer(input), 0))
}

/// Loss values of one diffusive update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusiveLosses {
    /// `½E[(D(x_t, x̂_{t-k}) - 1)²] + λ_rec · L1(x̃₀, x0)`.
    pub gen: f64,
    pub gen_adv: f64,
    pub rec_l1: f64,
    /// `½E[(D(x_t, x_{t-k}) - 1)²] + ½E[D(x_t, x̂_{t-k})²]`.
    pub disc: f64,
}

/// Tensors for one diffusive batch at step `t`.
struct DiffusiveBatch {
    x_t: Tensor,
    x_prev: Tensor,
    /// `coef_xt · x_t + √variance · z`: the part of the fake posterior sample not
    /// produced by the generator.
    offset: Tensor,
    coef_x0: f64,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn diffusive_batch(s: &NoiseSchedule, x0: &Tensor, t: usize, rng: &mut ChaCha8Rng) -> Result<DiffusiveBatch> {
    let c = s.posterior(t)?;
    let gamma = s.stride_gain(t)?;
    let ab_prev = s.alpha_bar(t - s.stride());
    let eps_prev = normal_tensor(rng, &x0.shape);
    let eps = normal_tensor(rng, &x0.shape);
    let z = normal_tensor(rng, &x0.shape);
    let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let x_prev: Vec<f64> = x0.data.iter().zip(&eps_prev.data).map(|(x, e)| a * x + b * e).collect();
    let (ga, gb) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let x_t: Vec<f64> = x_prev.iter().zip(&eps.data).map(|(x, e)| ga * x + gb * e).collect();
    let sd = c.variance.sqrt();
    let offset = x_t.iter().zip(&z.data).map(|(x, z)| c.coef_xt * x + sd * z).collect();
    Ok(DiffusiveBatch {
        x_t: Tensor::new(x0.shape.clone(), x_t),
        x_prev: Tensor::new(x0.shape.clone(), x_prev),
        offset: Tensor::new(x0.shape.clone(), offset),
        coef_x0: c.coef_x0,
    })
}

/// Diffusive-module losses for one branch without changing any parameter.
/// `x0` and `y_pair` are working range; `y_pair` is the conditioning source.
pub fn diffusive_losses(
    branch: &ModalityBranch,
    schedule: &NoiseSchedule,
    lambda_rec: f64,
    x0: &Image,
    y_pair: &Image,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusiveLosses> {
    x0.ensure_same_shape(y_pair, "diffusive_losses")?;
    let x0t = image_tensor(x0);
    let b = diffusive_batch(schedule, &x0t, t, rng)?;
    let mut g = Graph::new();
    let bg = branch.diff_gen.params.bind(&mut g, false);
    let bd = branch.diff_disc.params.bind(&mut g, false);
    let input = g.constant(stack_channels(&b.x_t, &image_tensor(y_pair)));
    let x0_hat = branch.diff_gen.forward(&mut g, &bg, input, &[t as f64]);
    let fake_prev = g.affine(x0_hat, b.coef_x0, Some(&b.offset));
    let xt_v = g.constant(b.x_t.clone());
    let fake_in = g.concat(xt_v, fake_prev);
    let real_in = g.constant(stack_channels(&b.x_t, &b.x_prev));
    let disc = crate::training::lsgan_disc_loss(&mut g, &branch.diff_disc, &bd, real_in, fake_in);
    let adv = lsgan_gen_loss(&mut g, &branch.diff_disc, &bd, fake_in);
    let x0_v = g.constant(x0t);
    let rec = g.mean_abs_diff(x0_hat, x0_v);
    let (adv, rec) = (g.scalar(adv), g.scalar(rec));
    Ok(DiffusiveLosses { gen: adv + lambda_rec * rec, gen_adv: adv, rec_l1: rec, disc: g.scalar(disc) })
}

/// Non-diffusive losses on an unpaired `(x0, y0)`; images in storage range.
pub fn nondiffusive_losses(model: &SynDiffModel, x0: &Image, y0: &Image) -> Result<CycleLosses> {
    x0.ensure_same_shape(y0, "nondiffusive_losses")?;
    Ok(cycle_losses(
        [&model.pet.nd_gen, &model.mri.nd_gen],
        [&model.pet.nd_disc, &model.mri.nd_disc],
        model.lambda_cycle,
        &batch_tensor([x0]),
        &batch_tensor([y0]),
    ))
}

/// Discriminator then generator update for one branch; returns losses before the step.
fn diffusive_step(
    branch: &mut ModalityBranch,
    opt_gen: &mut Adam,
    opt_disc: &mut Adam,
    schedule: &NoiseSchedule,
    lambda_rec: f64,
    x0: &Tensor,
    source: &Tensor,
    t: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusiveLosses> {
    let b = diffusive_batch(schedule, x0, t, rng)?;
    let n = x0.shape[0];
    let ts = vec![t as f64; n];
    let mut g = Graph::new();
    let bg = branch.diff_gen.params.bind(&mut g, true);
    let input = g.constant(stack_channels(&b.x_t, source));
    let x0_hat = branch.diff_gen.forward(&mut g, &bg, input, &ts);
    let fake_prev = g.affine(x0_hat, b.coef_x0, Some(&b.offset));
    let real_tuple = stack_channels(&b.x_t, &b.x_prev);
    let fake_tuple = stack_channels(&b.x_t, g.value(fake_prev));
    let disc = update_discriminator(&mut branch.diff_disc, opt_disc, &real_tuple, &fake_tuple, lr);

    let bd = branch.diff_disc.params.bind(&mut g, false);
    let xt_v = g.constant(b.x_t);
    let fake_in = g.concat(xt_v, fake_prev);
    let adv = lsgan_gen_loss(&mut g, &branch.diff_disc, &bd, fake_in);
    let x0_v = g.constant(x0.clone());
    let rec = g.mean_abs_diff(x0_hat, x0_v);
    let total = g.weighted_sum(&[(adv, 1.0), (rec, lambda_rec)]);
    let losses = DiffusiveLosses { gen: g.scalar(total), gen_adv: g.scalar(adv), rec_l1: g.scalar(rec), disc };
    let grads = g.backward(total);
    opt_gen.update(&mut branch.diff_gen.params.data, &bg.gradient(&grads), lr);
    Ok(losses)
}

/// Per-step losses of one SynDiff training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub t: usize,
    pub pet: DiffusiveLosses,
    pub mri: DiffusiveLosses,
    pub cycle: CycleLosses,
}

/// Optimizer state and loss history for a [`SynDiffModel`].
///
/// Optimizers are ordered per branch (PET then MRI) as diffusive generator,
/// diffusive discriminator, translator, translator discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynDiffTrainer {
    pub model: SynDiffModel,
    pub opt: Vec<Adam>,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl SynDiffTrainer {
    pub fn new(model: SynDiffModel, cfg: &TrainConfig) -> Self {
        let opt = model
            .pet
            .param_lens()
            .into_iter()
            .chain(model.mri.param_lens())
            .map(|n| Adam::new(n, cfg.adam_beta1, cfg.adam_beta2))
            .collect();
        Self { model, opt, epoch: 0, history: Vec::new() }
    }

    /// One full step on working-range batches `x0` (PET) and `y0` (MRI).
    pub fn step(&mut self, x0: &Tensor, y0: &Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let m = &mut self.model;
        let [pg, pd, pn, pnd, mg, md, mn, mnd] = &mut self.opt[..] else { unreachable!("eight optimizers") };
        let out = cycle_step(
            CycleNets {
                to_pet: &mut m.pet.nd_gen,
                to_mri: &mut m.mri.nd_gen,
                disc_pet: &mut m.pet.nd_disc,
                disc_mri: &mut m.mri.nd_disc,
                opt_to_pet: pn,
                opt_to_mri: mn,
                opt_disc_pet: pnd,
                opt_disc_mri: mnd,
            },
            x0,
            y0,
            cfg.lambda_cycle,
            1.0,
            cfg.learning_rate,
        );
        // the translated images enter the diffusive module as plain values
        let (y_tilde, x_tilde) = (out.fake_mri, out.fake_pet);
        let s = &m.schedule;
        let t = s.stride() * rng.random_range(1..=s.steps() / s.stride());
        let pet = diffusive_step(&mut m.pet, pg, pd, s, cfg.lambda_rec, x0, &y_tilde, t, cfg.learning_rate, rng)?;
        let mri = diffusive_step(&mut m.mri, mg, md, s, cfg.lambda_rec, y0, &x_tilde, t, cfg.learning_rate, rng)?;
        Ok(StepLosses { t, pet, mri, cycle: out.losses })
    }

    /// One pass over the unpaired pools.
    pub fn train_epoch(&mut self, pools: &UnpairedPools, cfg: &TrainConfig) -> Result<EpochStats> {
        cfg.validate()?;
        self.model.lambda_cycle = cfg.lambda_cycle;
        self.model.lambda_rec = cfg.lambda_rec;
        let (w, h) = pools.dims();
        let m = self.model.size_multiple();
        if w % m != 0 || h % m != 0 {
            return Err(Error::ShapeMismatch(format!("{w}x{h} raster is not a multiple of {m}")));
        }
        let mut streams = EpochStreams::new(cfg.seed, self.epoch);
        let (pet_order, mri_order) = epoch_orders(&mut streams, pools.pet.len(), pools.mri.len());
        let mut acc = StatsAccumulator::default();
        for step in 0..pools.steps_per_epoch(cfg.batch_size) {
            let x0 = batch_tensor(batch_indices(&pet_order, step, cfg.batch_size).iter().map(|&i| &pools.pet[i]));
            let y0 = batch_tensor(batch_indices(&mri_order, step, cfg.batch_size).iter().map(|&i| &pools.mri[i]));
            let l = self.step(&x0, &y0, cfg, &mut streams.noise)?;
            acc.add([l.pet.gen, l.pet.disc, l.mri.gen, l.mri.disc, l.cycle.cycle])?;
        }
        self.epoch += 1;
        let stats = acc.finish(self.epoch);
        self.history.push(stats.clone());
        Ok(stats)
    }
}

/// Reverse diffusion from noise with the PET branch conditioned on `y`
/// (storage range). The result is clamped to `[0,1]`.
pub fn synthesize_pseudo_pet(model: &SynDiffModel, y: &Image, seed: u64) -> Result<Image> {
    if !model.pet.diff_gen.params.all_finite() {
        return Err(Error::NonFinite("diffusive PET generator parameters".into()));
    }
    if !y.all_finite() {
        return Err(Error::NonFinite("input MRI".into()));
    }
    let gen = &model.pet.diff_gen;
    let mut denoise = |x_t: &Image, t: usize, cond: &Image| gen_forward(gen, x_t, t, cond);
    Ok(reverse_loop(y, &mut denoise, &model.schedule, seed)?.clamp_unit())
}
