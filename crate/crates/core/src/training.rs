//! Pieces shared by both unpaired translators: configuration, unpaired image
//! pools with independent shuffling, batching, and least-squares GAN terms.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{Bound, DiscriminatorNet, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_cycle: f64,
    pub lambda_rec: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_cycle: 10.0,
            lambda_rec: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} = {b} outside [0,1)")));
            }
        }
        if self.lambda_cycle < 0.0 || self.lambda_rec < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch. Column meaning for the CSV:
/// `x` is the PET side and `y` the MRI side; for SynDiff these are the
/// diffusive-module losses, for CycleGAN the adversarial losses of each side.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub gen_loss_x: f64,
    pub disc_loss_x: f64,
    pub gen_loss_y: f64,
    pub disc_loss_y: f64,
    pub cycle_loss: f64,
    pub steps: usize,
}

pub const LOSS_CSV_HEADER: &str = "epoch,gen_loss_x,disc_loss_x,gen_loss_y,disc_loss_y,cycle_loss";

pub fn loss_csv(history: &[EpochStats]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for s in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.epoch, s.gen_loss_x, s.disc_loss_x, s.gen_loss_y, s.disc_loss_y, s.cycle_loss
        )
        .unwrap();
    }
    out
}

#[derive(Default)]
pub(crate) struct StatsAccumulator {
    sums: [f64; 5],
    steps: usize,
}

impl StatsAccumulator {
    pub fn add(&mut self, vals: [f64; 5]) -> Result<()> {
        const NAMES: [&str; 5] = ["gen_loss_x", "disc_loss_x", "gen_loss_y", "disc_loss_y", "cycle_loss"];
        for (i, v) in vals.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{} = {v} at step {}", NAMES[i], self.steps)));
            }
            self.sums[i] += v;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(&self, epoch: usize) -> EpochStats {
        let n = self.steps.max(1) as f64;
        EpochStats {
            epoch,
            gen_loss_x: self.sums[0] / n,
            disc_loss_x: self.sums[1] / n,
            gen_loss_y: self.sums[2] / n,
            disc_loss_y: self.sums[3] / n,
            cycle_loss: self.sums[4] / n,
            steps: self.steps,
        }
    }
}

/// Two independent image pools. No correspondence between them is ever used.
#[derive(Clone, Debug)]
pub struct UnpairedPools {
    pub pet: Vec<Image>,
    pub mri: Vec<Image>,
}

impl UnpairedPools {
    pub fn new(pet: Vec<Image>, mri: Vec<Image>) -> Result<Self> {
        if pet.is_empty() || mri.is_empty() {
            return Err(Error::InvalidArgument("training pools must be nonempty".into()));
        }
        let first = &pet[0];
        for img in pet.iter().chain(&mri) {
            first.ensure_same_shape(img, "training pool")?;
        }
        Ok(Self { pet, mri })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.pet[0].width(), self.pet[0].height())
    }

    pub fn steps_per_epoch(&self, batch: usize) -> usize {
        self.pet.len().max(self.mri.len()).div_ceil(batch)
    }
}

/// Random streams for one epoch. Each pool is shuffled by its own ChaCha
/// stream, so the PET order carries no information about the MRI order.
pub struct EpochStreams {
    pub pet_order: ChaCha8Rng,
    pub mri_order: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

pub const PET_STREAM: u64 = 0;
pub const MRI_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

impl EpochStreams {
    pub fn new(seed: u64, epoch: usize) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64 * 4 + id);
            rng
        };
        Self { pet_order: stream(PET_STREAM), mri_order: stream(MRI_STREAM), noise: stream(NOISE_STREAM) }
    }
}

/// Shuffled index orders for the PET and MRI pools of `epoch`.
pub fn epoch_orders(streams: &mut EpochStreams, n_pet: usize, n_mri: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pet: Vec<usize> = (0..n_pet).collect();
    let mut mri: Vec<usize> = (0..n_mri).collect();
    pet.shuffle(&mut streams.pet_order);
    mri.shuffle(&mut streams.mri_order);
    (pet, mri)
}

/// Stacks storage-range images into a working-range `[N,1,H,W]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut dims = (0, 0);
    for img in images {
        dims = (img.height(), img.width());
        data.extend(img.data().iter().map(|v| 2.0 * v - 1.0));
        n += 1;
    }
    Tensor::new(vec![n, 1, dims.0, dims.1], data)
}

/// Picks batch `step` from a shuffled order, wrapping around short pools.
pub fn batch_indices(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|j| order[(step * batch + j) % order.len()]).collect()
}

/// Splits sample `s` of an `[N,1,H,W]` tensor into an [`Image`].
pub fn tensor_image(t: &Tensor, s: usize) -> Image {
    let (_, c, h, w) = t.dims4();
    assert_eq!(c, 1);
    Image::new(w, h, t.data[s * h * w..(s + 1) * h * w].to_vec()).unwrap()
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(vec![1, 1, img.height(), img.width()], img.data().to_vec())
}

/// Channel-wise concatenation of two `[N,1,H,W]` tensors as a new value.
pub fn stack_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(av, bv);
    g.value(c).clone()
}

/// Least-squares discriminator objective `½E[(D(real)-1)²] + ½E[D(fake)²]`.
pub(crate) fn lsgan_disc_loss(g: &mut Graph, d: &DiscriminatorNet, bound: &Bound, real: Var, fake: Var) -> Var {
    let sr = d.forward(g, bound, real);
    let sf = d.forward(g, bound, fake);
    let lr = g.mean_sq_dev(sr, 1.0);
    let lf = g.mean_sq_dev(sf, 0.0);
    g.weighted_sum(&[(lr, 0.5), (lf, 0.5)])
}

/// Least-squares generator objective `½E[(D(fake)-1)²]`.
pub(crate) fn lsgan_gen_loss(g: &mut Graph, d: &DiscriminatorNet, bound: &Bound, fake: Var) -> Var {
    let sf = d.forward(g, bound, fake);
    let l = g.mean_sq_dev(sf, 1.0);
    g.weighted_sum(&[(l, 0.5)])
}

/// One discriminator update on detached real/fake inputs; returns the loss before the step.
pub(crate) fn update_discriminator(
    d: &mut DiscriminatorNet,
    opt: &mut crate::nn::Adam,
    real: &Tensor,
    fake: &Tensor,
    lr: f64,
) -> f64 {
    let mut g = Graph::new();
    let bound = d.params.bind(&mut g, true);
    let (rv, fv) = (g.constant(real.clone()), g.constant(fake.clone()));
    let loss = lsgan_disc_loss(&mut g, d, &bound, rv, fv);
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    opt.update(&mut d.params.data, &bound.gradient(&grads), lr);
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_streams_are_distinct() {
        for seed in 0..5 {
            for epoch in 0..3 {
                let mut s = EpochStreams::new(seed, epoch);
                let (p, m) = epoch_orders(&mut s, 28, 28);
                assert_ne!(p, m, "pools shuffled identically for seed {seed} epoch {epoch}");
            }
        }
        let mut a = EpochStreams::new(1, 0);
        let mut b = EpochStreams::new(1, 0);
        assert_eq!(epoch_orders(&mut a, 10, 7), epoch_orders(&mut b, 10, 7));
    }

    #[test]
    fn batches_wrap_around_short_pools() {
        assert_eq!(batch_indices(&[4, 2, 0], 1, 2), vec![0, 4]);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(UnpairedPools::new(vec![], vec![Image::filled(8, 8, 0.0)]).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut acc = StatsAccumulator::default();
        assert!(acc.add([0.0, 1.0, 0.0, 0.0, f64::NAN]).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = EpochStats {
            epoch: 1,
            gen_loss_x: 0.5,
            disc_loss_x: 0.25,
            gen_loss_y: 1.0,
            disc_loss_y: 2.0,
            cycle_loss: 0.0,
            steps: 3,
        };
        assert_eq!(loss_csv(&[s]), format!("{LOSS_CSV_HEADER}\n1,0.5,0.25,1,2,0\n"));
    }
}
