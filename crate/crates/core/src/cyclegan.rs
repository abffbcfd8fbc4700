//! Cycle-consistent adversarial translation between MRI and PET.
//!
//! The same update is reused by SynDiff's non-diffusive module.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Adam, ConvNetSpec, DiscriminatorNet, GeneratorNet, Graph, Tensor};
use crate::training::{
    batch_indices, batch_tensor, epoch_orders, image_tensor, lsgan_disc_loss, lsgan_gen_loss, tensor_image,
    update_discriminator, EpochStats, EpochStreams, StatsAccumulator, TrainConfig, UnpairedPools,
};

/// Network sizes for a translator pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSizes {
    pub gen_base: usize,
    pub gen_depth: usize,
    pub disc_base: usize,
    pub disc_depth: usize,
}

impl Default for NetSizes {
    fn default() -> Self {
        Self { gen_base: 32, gen_depth: 3, disc_base: 32, disc_depth: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleGanModel {
    pub gen_m2p: GeneratorNet,
    pub gen_p2m: GeneratorNet,
    pub disc_pet: DiscriminatorNet,
    pub disc_mri: DiscriminatorNet,
    pub lambda_cycle: f64,
}

impl CycleGanModel {
    pub fn new(sizes: NetSizes, lambda_cycle: f64, seed: u64) -> Result<Self> {
        let gen = ConvNetSpec::generator(sizes.gen_base, sizes.gen_depth, 0, 1);
        let disc = ConvNetSpec::discriminator(sizes.disc_base, sizes.disc_depth, 1);
        Ok(Self {
            gen_m2p: GeneratorNet::new(gen, seed.wrapping_mul(31).wrapping_add(1))?,
            gen_p2m: GeneratorNet::new(gen, seed.wrapping_mul(31).wrapping_add(2))?,
            disc_pet: DiscriminatorNet::new(disc, seed.wrapping_mul(31).wrapping_add(3))?,
            disc_mri: DiscriminatorNet::new(disc, seed.wrapping_mul(31).wrapping_add(4))?,
            lambda_cycle,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.gen_m2p.params.all_finite()
            && self.gen_p2m.params.all_finite()
            && self.disc_pet.params.all_finite()
            && self.disc_mri.params.all_finite()
    }
}

/// Loss values for one unpaired `(x0, y0)` batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleLosses {
    /// `½E[(D_pet(G_m2p(y0)) - 1)²]`
    pub gen_adv_pet: f64,
    /// `½E[(D_mri(G_p2m(x0)) - 1)²]`
    pub gen_adv_mri: f64,
    pub disc_pet: f64,
    pub disc_mri: f64,
    /// Unweighted `L1(G_m2p(G_p2m(x0)), x0) + L1(G_p2m(G_m2p(y0)), y0)`.
    pub cycle: f64,
    /// `gen_adv_pet + gen_adv_mri + λ·cycle`.
    pub gen_total: f64,
}

/// Mutable view of a translator pair with its optimizer states.
pub(crate) struct CycleNets<'a> {
    pub to_pet: &'a mut GeneratorNet,
    pub to_mri: &'a mut GeneratorNet,
    pub disc_pet: &'a mut DiscriminatorNet,
    pub disc_mri: &'a mut DiscriminatorNet,
    pub opt_to_pet: &'a mut Adam,
    pub opt_to_mri: &'a mut Adam,
    pub opt_disc_pet: &'a mut Adam,
    pub opt_disc_mri: &'a mut Adam,
}

pub(crate) struct CycleStepOutput {
    pub losses: CycleLosses,
    /// Generated MRI `G_p2m(x0)` and PET `G_m2p(y0)` before the generator update.
    pub fake_mri: Tensor,
    pub fake_pet: Tensor,
}

/// One training step: discriminators first, then both generators against the
/// updated discriminators. `adv_weight = 0` trains the cycle terms alone.
pub(crate) fn cycle_step(
    nets: CycleNets<'_>,
    x0: &Tensor,
    y0: &Tensor,
    lambda_cycle: f64,
    adv_weight: f64,
    lr: f64,
) -> CycleStepOutput {
    let mut g = Graph::new();
    let bp = nets.to_pet.params.bind(&mut g, true);
    let bm = nets.to_mri.params.bind(&mut g, true);
    let (xv, yv) = (g.constant(x0.clone()), g.constant(y0.clone()));
    let fake_mri = nets.to_mri.forward(&mut g, &bm, xv, &[]);
    let fake_pet = nets.to_pet.forward(&mut g, &bp, yv, &[]);
    let rec_pet = nets.to_pet.forward(&mut g, &bp, fake_mri, &[]);
    let rec_mri = nets.to_mri.forward(&mut g, &bm, fake_pet, &[]);
    let fake_mri_t = g.value(fake_mri).clone();
    let fake_pet_t = g.value(fake_pet).clone();

    let disc_pet = update_discriminator(nets.disc_pet, nets.opt_disc_pet, x0, &fake_pet_t, lr);
    let disc_mri = update_discriminator(nets.disc_mri, nets.opt_disc_mri, y0, &fake_mri_t, lr);

    let bdp = nets.disc_pet.params.bind(&mut g, false);
    let bdm = nets.disc_mri.params.bind(&mut g, false);
    let adv_pet = lsgan_gen_loss(&mut g, nets.disc_pet, &bdp, fake_pet);
    let adv_mri = lsgan_gen_loss(&mut g, nets.disc_mri, &bdm, fake_mri);
    let cyc_pet = g.mean_abs_diff(rec_pet, xv);
    let cyc_mri = g.mean_abs_diff(rec_mri, yv);
    let total = g.weighted_sum(&[
        (adv_pet, adv_weight),
        (adv_mri, adv_weight),
        (cyc_pet, lambda_cycle),
        (cyc_mri, lambda_cycle),
    ]);
    let losses = CycleLosses {
        gen_adv_pet: g.scalar(adv_pet),
        gen_adv_mri: g.scalar(adv_mri),
        disc_pet,
        disc_mri,
        cycle: g.scalar(cyc_pet) + g.scalar(cyc_mri),
        gen_total: g.scalar(total),
    };
    let grads = g.backward(total);
    nets.opt_to_pet.update(&mut nets.to_pet.params.data, &bp.gradient(&grads), lr);
    nets.opt_to_mri.update(&mut nets.to_mri.params.data, &bm.gradient(&grads), lr);
    CycleStepOutput { losses, fake_mri: fake_mri_t, fake_pet: fake_pet_t }
}

/// Evaluates every loss term on one unpaired pair without updating anything.
pub fn cyclegan_losses(model: &CycleGanModel, x0: &Image, y0: &Image) -> Result<CycleLosses> {
    x0.ensure_same_shape(y0, "cyclegan_losses")?;
    Ok(cycle_losses(
        [&model.gen_m2p, &model.gen_p2m],
        [&model.disc_pet, &model.disc_mri],
        model.lambda_cycle,
        &batch_tensor([x0]),
        &batch_tensor([y0]),
    ))
}

/// Loss terms for translators `[to_pet, to_mri]` and discriminators `[pet, mri]`.
pub(crate) fn cycle_losses(
    gens: [&GeneratorNet; 2],
    discs: [&DiscriminatorNet; 2],
    lambda_cycle: f64,
    x0: &Tensor,
    y0: &Tensor,
) -> CycleLosses {
    let [to_pet, to_mri] = gens;
    let [d_pet, d_mri] = discs;
    let mut g = Graph::new();
    let bp = to_pet.params.bind(&mut g, false);
    let bm = to_mri.params.bind(&mut g, false);
    let bdp = d_pet.params.bind(&mut g, false);
    let bdm = d_mri.params.bind(&mut g, false);
    let (xv, yv) = (g.constant(x0.clone()), g.constant(y0.clone()));
    let fake_mri = to_mri.forward(&mut g, &bm, xv, &[]);
    let fake_pet = to_pet.forward(&mut g, &bp, yv, &[]);
    let rec_pet = to_pet.forward(&mut g, &bp, fake_mri, &[]);
    let rec_mri = to_mri.forward(&mut g, &bm, fake_pet, &[]);
    let disc_pet = lsgan_disc_loss(&mut g, d_pet, &bdp, xv, fake_pet);
    let disc_mri = lsgan_disc_loss(&mut g, d_mri, &bdm, yv, fake_mri);
    let adv_pet = lsgan_gen_loss(&mut g, d_pet, &bdp, fake_pet);
    let adv_mri = lsgan_gen_loss(&mut g, d_mri, &bdm, fake_mri);
    let cyc_pet = g.mean_abs_diff(rec_pet, xv);
    let cyc_mri = g.mean_abs_diff(rec_mri, yv);
    let cycle = g.scalar(cyc_pet) + g.scalar(cyc_mri);
    let (ap, am) = (g.scalar(adv_pet), g.scalar(adv_mri));
    CycleLosses {
        gen_adv_pet: ap,
        gen_adv_mri: am,
        disc_pet: g.scalar(disc_pet),
        disc_mri: g.scalar(disc_mri),
        cycle,
        gen_total: ap + am + lambda_cycle * cycle,
    }
}

/// Cycle term for arbitrary translators, `L1(to_pet(to_mri(x0)), x0) + L1(to_mri(to_pet(y0)), y0)`.
pub fn cycle_consistency(
    to_pet: impl Fn(&Image) -> Image,
    to_mri: impl Fn(&Image) -> Image,
    x0: &Image,
    y0: &Image,
) -> f64 {
    let l1 =
        |a: &Image, b: &Image| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
    l1(&to_pet(&to_mri(x0)), x0) + l1(&to_mri(&to_pet(y0)), y0)
}

/// Optimizer state and loss history for a [`CycleGanModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGanTrainer {
    pub model: CycleGanModel,
    pub opt: [Adam; 4],
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl CycleGanTrainer {
    pub fn new(model: CycleGanModel, cfg: &TrainConfig) -> Self {
        let adam = |n: usize| Adam::new(n, cfg.adam_beta1, cfg.adam_beta2);
        let opt = [
            adam(model.gen_m2p.params.len()),
            adam(model.gen_p2m.params.len()),
            adam(model.disc_pet.params.len()),
            adam(model.disc_mri.params.len()),
        ];
        Self { model, opt, epoch: 0, history: Vec::new() }
    }

    /// One pass over the unpaired pools.
    pub fn train_epoch(&mut self, pools: &UnpairedPools, cfg: &TrainConfig) -> Result<EpochStats> {
        cfg.validate()?;
        self.model.lambda_cycle = cfg.lambda_cycle;
        let mut streams = EpochStreams::new(cfg.seed, self.epoch);
        let (pet_order, mri_order) = epoch_orders(&mut streams, pools.pet.len(), pools.mri.len());
        let mut acc = StatsAccumulator::default();
        for step in 0..pools.steps_per_epoch(cfg.batch_size) {
            let x0 = batch_tensor(batch_indices(&pet_order, step, cfg.batch_size).iter().map(|&i| &pools.pet[i]));
            let y0 = batch_tensor(batch_indices(&mri_order, step, cfg.batch_size).iter().map(|&i| &pools.mri[i]));
            let m = &mut self.model;
            let [o_m2p, o_p2m, o_dp, o_dm] = &mut self.opt;
            let out = cycle_step(
                CycleNets {
                    to_pet: &mut m.gen_m2p,
                    to_mri: &mut m.gen_p2m,
                    disc_pet: &mut m.disc_pet,
                    disc_mri: &mut m.disc_mri,
                    opt_to_pet: o_m2p,
                    opt_to_mri: o_p2m,
                    opt_disc_pet: o_dp,
                    opt_disc_mri: o_dm,
                },
                &x0,
                &y0,
                cfg.lambda_cycle,
                1.0,
                cfg.learning_rate,
            );
            let l = out.losses;
            acc.add([l.gen_adv_pet, l.disc_pet, l.gen_adv_mri, l.disc_mri, l.cycle])?;
        }
        self.epoch += 1;
        let stats = acc.finish(self.epoch);
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Cycle-only optimization on a fixed pair; returns the cycle loss per step.
    pub fn fit_cycle_only(&mut self, x0: &Image, y0: &Image, lr: f64, steps: usize) -> Vec<f64> {
        let (xt, yt) = (batch_tensor([x0]), batch_tensor([y0]));
        let lambda = self.model.lambda_cycle.max(1.0);
        (0..steps)
            .map(|_| {
                let m = &mut self.model;
                let [o_m2p, o_p2m, o_dp, o_dm] = &mut self.opt;
                cycle_step(
                    CycleNets {
                        to_pet: &mut m.gen_m2p,
                        to_mri: &mut m.gen_p2m,
                        disc_pet: &mut m.disc_pet,
                        disc_mri: &mut m.disc_mri,
                        opt_to_pet: o_m2p,
                        opt_to_mri: o_p2m,
                        opt_disc_pet: o_dp,
                        opt_disc_mri: o_dm,
                    },
                    &xt,
                    &yt,
                    lambda,
                    0.0,
                    lr,
                )
                .losses
                .cycle
            })
            .collect()
    }
}

/// Deterministic MRI → pseudo-PET translation, clamped to `[0,1]`.
pub fn cyclegan_translate(model: &CycleGanModel, y: &Image) -> Result<Image> {
    if !model.gen_m2p.params.all_finite() {
        return Err(Error::NonFinite("CycleGAN generator parameters".into()));
    }
    let out = model.gen_m2p.infer(image_tensor(&y.to_working()), &[]);
    Ok(tensor_image(&out, 0).to_storage().clamp_unit())
}
