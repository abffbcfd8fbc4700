//! Convolutional generator (encoder–decoder with skips and optional time
//! conditioning) and patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Tensor, Var};
use super::params::{Bound, ParamSet};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    GeneratorUnet,
    DiscriminatorPatch,
}

impl NetKind {
    pub fn code(self) -> u32 {
        match self {
            NetKind::GeneratorUnet => 0,
            NetKind::DiscriminatorPatch => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(NetKind::GeneratorUnet),
            1 => Some(NetKind::DiscriminatorPatch),
            _ => None,
        }
    }
}

/// Architecture description; the parameter layout is a pure function of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub kind: NetKind,
    pub base_channels: usize,
    pub depth: usize,
    /// Sinusoidal time-feature width; 0 disables time conditioning.
    pub time_embed_dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ConvNetSpec {
    pub fn generator(base_channels: usize, depth: usize, time_embed_dim: usize, input_channels: usize) -> Self {
        Self { kind: NetKind::GeneratorUnet, base_channels, depth, time_embed_dim, input_channels, output_channels: 1 }
    }

    pub fn discriminator(base_channels: usize, depth: usize, input_channels: usize) -> Self {
        Self {
            kind: NetKind::DiscriminatorPatch,
            base_channels,
            depth,
            time_embed_dim: 0,
            input_channels,
            output_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("network depth {} < 2", self.depth)));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.kind == NetKind::DiscriminatorPatch && self.time_embed_dim != 0 {
            return Err(Error::InvalidArgument("discriminators take no time embedding".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Ordered `(name, shape)` list of parameter segments.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        match self.kind {
            NetKind::GeneratorUnet => {
                let l = self.depth;
                conv("enc0".into(), self.channels(0), self.input_channels, 3);
                for lvl in 1..l {
                    conv(format!("down{lvl}"), self.channels(lvl), self.channels(lvl - 1), 3);
                    conv(format!("enc{lvl}"), self.channels(lvl), self.channels(lvl), 3);
                }
                conv("mid".into(), self.channels(l - 1), self.channels(l - 1), 3);
                for lvl in (0..l - 1).rev() {
                    conv(format!("up{lvl}"), self.channels(lvl), self.channels(lvl + 1), 3);
                    conv(format!("merge{lvl}"), self.channels(lvl), 2 * self.channels(lvl), 3);
                }
                conv("out".into(), self.output_channels, self.channels(0), 3);
                if self.time_embed_dim > 0 {
                    let d = self.time_embed_dim;
                    out.push(("temb.dense.w".into(), vec![d, d]));
                    out.push(("temb.dense.b".into(), vec![d]));
                    for lvl in 0..l {
                        out.push((format!("temb.l{lvl}.w"), vec![self.channels(lvl), d]));
                        out.push((format!("temb.l{lvl}.b"), vec![self.channels(lvl)]));
                    }
                }
            }
            NetKind::DiscriminatorPatch => {
                let mut cin = self.input_channels;
                for lvl in 0..self.depth {
                    conv(format!("conv{lvl}"), self.channels(lvl), cin, 4);
                    cin = self.channels(lvl);
                }
                conv("score".into(), self.output_channels, cin, 3);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Input side length must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        match self.kind {
            NetKind::GeneratorUnet => 1 << (self.depth - 1),
            NetKind::DiscriminatorPatch => 1 << self.depth,
        }
    }
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub fn time_features(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Tensor::new(vec![ts.len(), dim], data)
}

fn new_params(spec: &ConvNetSpec, seed: u64, out_gain: f64) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::zeros(&spec.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.init_he(&mut rng, |name| match name {
        "out.w" | "score.w" => out_gain,
        n if n.starts_with("temb.") => 1.0,
        _ => (2.0 / (1.0 + SLOPE * SLOPE)).sqrt(),
    });
    Ok(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub spec: ConvNetSpec,
    pub params: ParamSet,
}

impl GeneratorNet {
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        if spec.kind != NetKind::GeneratorUnet {
            return Err(Error::InvalidArgument("generator requires a generator-unet spec".into()));
        }
        Ok(Self { spec, params: new_params(&spec, seed, 0.1)? })
    }

    pub fn from_params(spec: ConvNetSpec, params: ParamSet) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Checkpoint("parameter count does not match spec".into()));
        }
        Ok(Self { spec, params })
    }

    /// Zeroes the output convolution, making the network output identically 0.
    pub fn zero_final_layer(&mut self) {
        self.params.slice_mut("out.w").unwrap().fill(0.0);
        self.params.slice_mut("out.b").unwrap().fill(0.0);
    }

    /// Records the forward pass. `x: [N, input_channels, H, W]`; `ts` holds one
    /// time value per sample and is ignored when the spec has no time embedding.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, ts: &[f64]) -> Var {
        let spec = &self.spec;
        let mut p = bound.cursor();
        let next_conv = |g: &mut Graph, h: Var, stride: usize, p: &mut dyn Iterator<Item = Var>| {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            g.conv2d(h, w, b, stride, 1)
        };
        // Conv segments come first in the layout, time-embedding segments last.
        let conv_vars: Vec<Var> = (&mut p).take(self.conv_segment_count()).collect();
        let temb: Vec<Var> = if spec.time_embed_dim > 0 {
            let feats = g.constant(time_features(ts, spec.time_embed_dim));
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            let e = g.linear(feats, w, b);
            let e = g.leaky_relu(e, SLOPE);
            (0..spec.depth)
                .map(|_| {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    g.linear(e, w, b)
                })
                .collect()
        } else {
            Vec::new()
        };
        let inject = |g: &mut Graph, h: Var, lvl: usize| match temb.get(lvl) {
            Some(&e) => g.add_channel(h, e),
            None => h,
        };

        let mut c = conv_vars.into_iter();
        let mut h = next_conv(g, x, 1, &mut c);
        h = inject(g, h, 0);
        h = g.leaky_relu(h, SLOPE);
        let mut skips = vec![h];
        for lvl in 1..spec.depth {
            h = next_conv(g, h, 2, &mut c);
            h = inject(g, h, lvl);
            h = g.leaky_relu(h, SLOPE);
            h = next_conv(g, h, 1, &mut c);
            h = g.leaky_relu(h, SLOPE);
            skips.push(h);
        }
        h = next_conv(g, h, 1, &mut c);
        h = g.leaky_relu(h, SLOPE);
        for lvl in (0..spec.depth - 1).rev() {
            h = g.upsample2x(h);
            h = next_conv(g, h, 1, &mut c);
            h = g.leaky_relu(h, SLOPE);
            h = g.concat(h, skips[lvl]);
            h = next_conv(g, h, 1, &mut c);
            h = inject(g, h, lvl);
            h = g.leaky_relu(h, SLOPE);
        }
        h = next_conv(g, h, 1, &mut c);
        g.tanh(h)
    }

    fn conv_segment_count(&self) -> usize {
        // enc0 + 2 per extra level + mid + 2 per decoder level + out, two segments each
        2 * (1 + 2 * (self.spec.depth - 1) + 1 + 2 * (self.spec.depth - 1) + 1)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn infer(&self, x: Tensor, ts: &[f64]) -> Tensor {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &bound, xv, ts);
        g.value(y).clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet {
    pub spec: ConvNetSpec,
    pub params: ParamSet,
}

impl DiscriminatorNet {
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        if spec.kind != NetKind::DiscriminatorPatch {
            return Err(Error::InvalidArgument("discriminator requires a patch spec".into()));
        }
        Ok(Self { spec, params: new_params(&spec, seed, 1.0)? })
    }

    pub fn from_params(spec: ConvNetSpec, params: ParamSet) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Checkpoint("parameter count does not match spec".into()));
        }
        Ok(Self { spec, params })
    }

    /// Records the forward pass; returns a `[N, 1, H/2^depth, W/2^depth]` score map.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let mut p = bound.cursor();
        let mut h = x;
        for _ in 0..self.spec.depth {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            h = g.conv2d(h, w, b, 2, 1);
            h = g.leaky_relu(h, SLOPE);
        }
        let (w, b) = (p.next().unwrap(), p.next().unwrap());
        g.conv2d(h, w, b, 1, 1)
    }

    pub fn infer(&self, x: Tensor) -> Tensor {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let y = self.forward(&mut g, &bound, xv);
        g.value(y).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes_follow_spec() {
        let spec = ConvNetSpec::generator(4, 2, 8, 2);
        let expect = (4 * 2 * 9 + 4)
            + (8 * 4 * 9 + 8)
            + (8 * 8 * 9 + 8)
            + (8 * 8 * 9 + 8)
            + (4 * 8 * 9 + 4)
            + (4 * 8 * 9 + 4)
            + (4 * 9 + 1)
            + (64 + 8)
            + (4 * 8 + 4)
            + (8 * 8 + 8);
        assert_eq!(spec.param_count(), expect);
        let d = ConvNetSpec::discriminator(4, 2, 2);
        assert_eq!(d.param_count(), (4 * 2 * 16 + 4) + (8 * 4 * 16 + 8) + (8 * 9 + 1));
    }

    #[test]
    fn depth_below_two_rejected() {
        assert!(GeneratorNet::new(ConvNetSpec::generator(4, 1, 0, 1), 0).is_err());
    }

    #[test]
    fn generator_output_shape_matches_input() {
        for depth in [2, 3] {
            let net = GeneratorNet::new(ConvNetSpec::generator(4, depth, 16, 2), 3).unwrap();
            let y = net.infer(Tensor::filled(vec![2, 2, 16, 16], 0.3), &[10.0, 20.0]);
            assert_eq!(y.shape, vec![2, 1, 16, 16]);
            assert!(y.data.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zeroed_final_layer_outputs_zero() {
        let mut net = GeneratorNet::new(ConvNetSpec::generator(4, 3, 16, 2), 3).unwrap();
        net.zero_final_layer();
        let y = net.infer(Tensor::new(vec![1, 2, 16, 16], (0..512).map(|i| (i as f64).sin()).collect()), &[250.0]);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_score_map_shape() {
        let d = DiscriminatorNet::new(ConvNetSpec::discriminator(4, 3, 2), 1).unwrap();
        let s = d.infer(Tensor::filled(vec![1, 2, 64, 64], 0.1));
        assert_eq!(s.shape, vec![1, 1, 8, 8]);
    }

    #[test]
    fn time_features_are_bounded() {
        let f = time_features(&[0.0, 999.0], 8);
        assert_eq!(f.shape, vec![2, 8]);
        assert_eq!(&f.data[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(f.data.iter().all(|v| v.abs() <= 1.0));
    }
}
