use rand::Rng;

use super::{Graph, ParamId, ParamStore};
use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::Tensor;

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(&format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng))?;
        let b = if bias { Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let last = g.shape(x).len() - 1;
        let n = g.layer_norm(x, last)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Channels-last 2D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (kernel * kernel * cin) as f64;
        let w = store.add(
            &format!("{name}.weight"),
            Tensor::uniform(&[kernel, kernel, cin, cout], (3.0 / fan_in).sqrt(), rng),
        )?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, kernel, stride, pad: kernel / 2 })
    }

    /// `x`: `[B, H, W, Cin]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = if self.kernel == 1 && self.stride == 1 {
            // a 1x1 convolution is a per-pixel linear map
            let (cin, cout) = (g.shape(w)[2], g.shape(w)[3]);
            let w2 = g.reshape(w, &[cin, cout])?;
            g.matmul(x, w2)?
        } else {
            g.conv2d(x, w, self.stride, self.pad)?
        };
        g.add(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h);
        self.second.forward(g, h)
    }
}
