/// Adam optimizer state for one flat parameter vector.
///
/// Updated parameters are rounded to `f32` so that the stored checkpoint is
/// an exact image of the live model. Moments stay in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let delta = lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = (params[i] - delta) as f32 as f64;
        }
    }
}
