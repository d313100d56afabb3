//! Parameterised building blocks shared by the encoders and the CNN.

use crate::autograd::{ConvSpec, Graph, Padding, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Real;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: store.xavier(format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng),
            b: store.zeros(format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, eps: f64) -> Self {
        LayerNorm {
            gain: store.ones(format!("{name}.gain"), &[width]),
            bias: store.zeros(format!("{name}.bias"), &[width]),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Convolution over `[frames, H, W, C]` with weights `[k, k, C, C_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let area = kernel * kernel;
        Conv2d {
            w: store.xavier(
                format!("{name}.w"),
                &[kernel, kernel, c_in, c_out],
                area * c_in,
                area * c_out,
                rng,
            ),
            b: bias.then(|| store.zeros(format!("{name}.b"), &[c_out])),
            spec: ConvSpec {
                kernel,
                stride,
                padding,
            },
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv2d(x, w, self.spec)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}
