use serde::{Deserialize, Serialize};

use super::{check_layout, embedding_tensor, init_from_layout, Bound, Ctx, Params, Slot};
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Real;

/// Negative slope of the leaky rectifier between convolutions.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub base_width: usize,
    /// Number of stride-2 convolutions; width doubles after each.
    pub n_layers: usize,
    pub time_embed_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_size: 16,
            base_width: 16,
            n_layers: 3,
            time_embed_dim: 32,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("disc_image_size", self.image_size),
            ("disc_base_width", self.base_width),
            ("disc_layers", self.n_layers),
            ("disc_time_embed_dim", self.time_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "must be positive"));
            }
        }
        if self.n_layers > 8 {
            return Err(Error::invalid("disc_layers", "at most 8"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("disc_time_embed_dim", "must be even"));
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Vec<Slot> {
        let mut slots = Vec::new();
        let mut c_in = 1;
        for i in 0..self.n_layers {
            let c_out = self.base_width << i;
            slots.extend(Slot::conv(&format!("conv{i}"), c_out, c_in));
            if i == 0 {
                slots.extend(Slot::linear("temb", c_out, self.time_embed_dim));
            }
            c_in = c_out;
        }
        slots.extend(Slot::linear("head", 1, c_in));
        slots
    }
}

/// Time-conditioned real/denoised classifier D(x, t) returning one logit
/// per item. A positive logit means "produced by the forward process".
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: Params,
}

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let params = init_from_layout(&config.layout(), &mut rng);
        Ok(Discriminator { config, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: Params) -> Result<Self> {
        config.validate()?;
        check_layout(&config.layout(), &params)?;
        Ok(Discriminator { config, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Appends D to `graph`; returns a `[B]`-shaped logit node.
    pub fn forward<S: Real>(&self, graph: &mut Graph<S>, bound: &Bound, x: Var, ts: &[usize]) -> Result<Var> {
        let shape = graph.value(x).shape().to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || ts.len() != shape[0] {
            return Err(Error::Shape {
                op: "discriminator_forward",
                expected: vec![ts.len(), 1, s, s],
                got: shape,
            });
        }
        let ctx = Ctx {
            params: &self.params,
            bound,
        };
        let emb = graph.constant(embedding_tensor(ts, self.config.time_embed_dim)?);
        let mut h = x;
        for i in 0..self.config.n_layers {
            h = ctx.conv(graph, &format!("conv{i}"), h, 2)?;
            if i == 0 {
                let proj = ctx.linear(graph, "temb", emb)?;
                h = graph.add_channel(h, proj)?;
            }
            h = graph.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = graph.global_avg_pool(h)?;
        ctx.linear(graph, "head", pooled)
    }

    pub fn forward_graph<S: Real>(&self, graph: &mut Graph<S>, x: Var, ts: &[usize], trainable: bool) -> Result<(Var, Bound)> {
        let bound = self.params.bind(graph, trainable);
        let out = self.forward(graph, &bound, x, ts)?;
        Ok((out, bound))
    }

    /// Logits for a batch, without gradient tracking.
    pub fn logits(&self, x: &ImageTensor, ts: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, xv, ts, false)?;
        Ok(g.value(out).data().to_vec())
    }
}
