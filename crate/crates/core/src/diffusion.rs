//! Variance-preserving forward diffusion and the stride-`k` Gaussian
//! posterior used by the adversarial projector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Precomputed β/α/ᾱ tables. Index 0 of `alpha_bar` is the clean image.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    stride: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Mean coefficients and variance of `q(x_{t-k} | x_t, x_0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `t = 1..=steps`.
    pub fn new(steps: usize, stride: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if stride == 0 || stride > steps || !steps.is_multiple_of(stride) {
            return Err(Error::InvalidArgument(format!("stride {stride} must divide step count {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!("beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let beta: Vec<f64> = (1..=steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self { steps, stride, beta_start, beta_end, beta, alpha_bar })
    }

    /// T = 1000, k = 250, β ∈ [1e-4, 0.02].
    pub fn default_fast() -> Self {
        Self::new(1000, 250, 1e-4, 0.02).unwrap()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    /// β for step `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Reverse-chain visit order `T, T-k, …, k`.
    pub fn reverse_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.steps / self.stride).rev().map(move |i| i * self.stride)
    }

    /// The stride grid `{k, 2k, …, T}`.
    pub fn grid(&self) -> Vec<usize> {
        (1..=self.steps / self.stride).map(|i| i * self.stride).collect()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument(format!("step {t} outside [0, {}]", self.steps)));
        }
        Ok(())
    }

    fn check_grid(&self, t: usize) -> Result<()> {
        self.check_step(t)?;
        if t < self.stride || !t.is_multiple_of(self.stride) {
            return Err(Error::InvalidArgument(format!("step {t} is not on the stride-{} grid", self.stride)));
        }
        Ok(())
    }

    /// Ratio ᾱ_t / ᾱ_{t-k}: the signal kept across one projector stride.
    pub fn stride_gain(&self, t: usize) -> Result<f64> {
        self.check_grid(t)?;
        Ok(self.alpha_bar[t] / self.alpha_bar[t - self.stride])
    }

    pub fn posterior(&self, t: usize) -> Result<PosteriorCoeffs> {
        let gamma = self.stride_gain(t)?;
        let ab_t = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - self.stride];
        Ok(PosteriorCoeffs {
            coef_x0: ab_prev.sqrt() * (1.0 - gamma) / (1.0 - ab_t),
            coef_xt: gamma.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t),
            variance: (1.0 - gamma) * (1.0 - ab_prev) / (1.0 - ab_t),
        })
    }
}

/// Working image of the reverse chain at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Image,
    pub t: usize,
}

/// `x_t = √ᾱ_t · x0 + √(1-ᾱ_t) · eps`.
pub fn forward_sample(x0: &Image, t: usize, eps: &Image, s: &NoiseSchedule) -> Result<Image> {
    s.check_step(t)?;
    x0.ensure_same_shape(eps, "forward_sample")?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Image::new(x0.width(), x0.height(), data)
}

/// Advances `x_{t-k}` to `x_t` with fresh noise, so `(x_{t-k}, x_t)` is a joint
/// forward-process sample: `x_t = √γ · x_{t-k} + √(1-γ) · eps`.
pub fn bridge_sample(x_prev: &Image, t: usize, eps: &Image, s: &NoiseSchedule) -> Result<Image> {
    x_prev.ensure_same_shape(eps, "bridge_sample")?;
    let gamma = s.stride_gain(t)?;
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let data = x_prev.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Image::new(x_prev.width(), x_prev.height(), data)
}

/// Draws `x_{t-k} ~ q(x_{t-k} | x_t, x0_hat)` as `mean + √variance · noise`.
pub fn posterior_sample(x_t: &Image, x0_hat: &Image, t: usize, s: &NoiseSchedule, noise: &Image) -> Result<Image> {
    x_t.ensure_same_shape(x0_hat, "posterior_sample")?;
    x_t.ensure_same_shape(noise, "posterior_sample noise")?;
    let c = s.posterior(t)?;
    let sd = c.variance.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .zip(noise.data())
        .map(|((xt, x0), z)| c.coef_x0 * x0 + c.coef_xt * xt + sd * z)
        .collect();
    Image::new(x_t.width(), x_t.height(), data)
}

/// Anything that estimates the clean target from `(x_t, t, y)` in working range.
pub trait Denoiser {
    fn predict_x0(&mut self, x_t: &Image, t: usize, y: &Image) -> Result<Image>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Image, usize, &Image) -> Result<Image>,
{
    fn predict_x0(&mut self, x_t: &Image, t: usize, y: &Image) -> Result<Image> {
        self(x_t, t, y)
    }
}

pub fn gaussian_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Image {
    let data = (0..width * height).map(|_| StandardNormal.sample(rng)).collect();
    Image::new(width, height, data).unwrap()
}

/// Conditional reverse chain from pure noise. `y` is given in storage range
/// `[0,1]`; the returned image is mapped back to storage range (not clamped).
pub fn reverse_loop(y: &Image, g: &mut impl Denoiser, s: &NoiseSchedule, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_work = y.to_working();
    let (w, h) = (y.width(), y.height());
    let mut state = DiffusionState { x: gaussian_image(&mut rng, w, h), t: s.steps() };
    for t in s.reverse_steps() {
        debug_assert_eq!(state.t, t);
        let x0_hat = g.predict_x0(&state.x, t, &y_work)?;
        x0_hat.ensure_same_shape(&state.x, "denoiser output")?;
        let next = if t == s.stride() {
            // zero posterior variance at t - k = 0
            x0_hat
        } else {
            let noise = gaussian_image(&mut rng, w, h);
            posterior_sample(&state.x, &x0_hat, t, s, &noise)?
        };
        state = DiffusionState { x: next, t: t - s.stride() };
    }
    Ok(state.x.to_storage())
}
