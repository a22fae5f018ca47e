//! The two trainable networks: a time-conditioned U-shaped noise predictor
//! and a time-conditioned strided-convolution discriminator.

mod denoiser;
mod discriminator;
mod params;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use params::{fan_in_normal, Bound, Params};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Sinusoidal embedding: `sin(t / 10000^(2i/dim))` for the first half,
/// `cos(...)` for the second, `i = 0..dim/2`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid("time_embed_dim", format!("must be even and >= 2, got {dim}")));
    }
    let half = dim / 2;
    let t = t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| t / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    Ok(freqs.iter().map(|f| f.sin()).chain(freqs.iter().map(|f| f.cos())).collect())
}

/// `[B, dim]` embedding tensor for per-item timesteps.
pub(crate) fn embedding_tensor<S: Real>(ts: &[usize], dim: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim)?.into_iter().map(S::of));
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Largest of 8, 4, 2, 1 groups dividing `channels`.
pub(crate) fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// N(0, 1/fan_in)
    Kernel(usize),
    Zeros,
    Ones,
}

/// Parameter layout entry.
pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl Slot {
    pub fn conv(name: &str, c_out: usize, c_in: usize) -> [Slot; 2] {
        [
            Slot {
                name: format!("{name}.weight"),
                shape: vec![c_out, c_in, 3, 3],
                init: Init::Kernel(c_in * 9),
            },
            Slot {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn linear(name: &str, d_out: usize, d_in: usize) -> [Slot; 2] {
        [
            Slot {
                name: format!("{name}.weight"),
                shape: vec![d_out, d_in],
                init: Init::Kernel(d_in),
            },
            Slot {
                name: format!("{name}.bias"),
                shape: vec![d_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn norm(name: &str, c: usize) -> [Slot; 2] {
        [
            Slot {
                name: format!("{name}.gamma"),
                shape: vec![c],
                init: Init::Ones,
            },
            Slot {
                name: format!("{name}.beta"),
                shape: vec![c],
                init: Init::Zeros,
            },
        ]
    }
}

pub(crate) fn init_from_layout(layout: &[Slot], rng: &mut Rng) -> Params {
    let mut params = Params::new();
    for slot in layout {
        let t = match slot.init {
            Init::Kernel(fan_in) => fan_in_normal(rng, &slot.shape, fan_in),
            Init::Zeros => Tensor::zeros(&slot.shape),
            Init::Ones => Tensor::full(&slot.shape, 1.0),
        };
        params.insert(slot.name.clone(), t).expect("layout names are unique");
    }
    params
}

pub(crate) fn check_layout(layout: &[Slot], params: &Params) -> Result<()> {
    if layout.len() != params.len() {
        return Err(Error::invalid(
            "parameters",
            format!("expected {} tensors, got {}", layout.len(), params.len()),
        ));
    }
    for (slot, (name, t)) in layout.iter().zip(params.iter()) {
        if slot.name != name || slot.shape != t.shape() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} {:?}, got {} {:?}", slot.name, slot.shape, name, t.shape()),
            ));
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite {
            term: "parameters".into(),
        });
    }
    Ok(())
}

/// Shorthand for building layers against bound parameters.
pub(crate) struct Ctx<'a> {
    pub params: &'a Params,
    pub bound: &'a Bound,
}

impl Ctx<'_> {
    pub fn p(&self, name: &str) -> Var {
        self.bound.var(self.params, name)
    }

    pub fn conv<S: Real>(&self, g: &mut Graph<S>, name: &str, x: Var, stride: usize) -> Result<Var> {
        g.conv3x3(
            x,
            self.p(&format!("{name}.weight")),
            self.p(&format!("{name}.bias")),
            stride,
        )
    }

    pub fn linear<S: Real>(&self, g: &mut Graph<S>, name: &str, x: Var) -> Result<Var> {
        g.linear(x, self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")))
    }

    pub fn norm<S: Real>(&self, g: &mut Graph<S>, name: &str, x: Var) -> Result<Var> {
        let c = g.value(x).shape()[1];
        g.group_norm(
            x,
            self.p(&format!("{name}.gamma")),
            self.p(&format!("{name}.beta")),
            norm_groups(c),
        )
    }
}
