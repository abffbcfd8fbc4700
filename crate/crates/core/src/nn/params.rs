use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Gradients, Graph, Tensor, Var};

/// One named block of a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector split into named segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    segments: Vec<Segment>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            let seg = Segment { name: name.clone(), shape: shape.clone(), offset };
            offset += seg.len();
            segments.push(seg);
        }
        Self { segments, data: vec![0.0; offset] }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, seg: &Segment) -> &[f64] {
        &self.data[seg.offset..seg.offset + seg.len()]
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.segment(name)?.clone();
        Some(&mut self.data[seg.offset..seg.offset + seg.len()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Weights drawn from N(0, gain²/fan_in); 1-D segments (biases) stay zero.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R, gain_for: impl Fn(&str) -> f64) {
        for seg in &self.segments {
            if seg.shape.len() < 2 {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let std = gain_for(&seg.name) / (fan_in as f64).sqrt();
            for v in &mut self.data[seg.offset..seg.offset + seg.len()] {
                let z: f64 = rng.sample(StandardNormal);
                // parameters live at f32 precision so checkpoints are lossless
                *v = (std * z) as f32 as f64;
            }
        }
    }

    /// Places every segment on the graph, as gradient leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .segments
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.slice(s).to_vec());
                if trainable {
                    g.leaf(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { vars, sizes: self.segments.iter().map(Segment::len).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Graph handles for a bound [`ParamSet`], in segment order.
pub struct Bound {
    vars: Vec<Var>,
    sizes: Vec<usize>,
}

impl Bound {
    pub fn cursor(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().copied()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Flattened gradient matching the parameter vector layout.
    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        grads.flatten(&self.vars, &self.sizes)
    }
}
