use serde::{Deserialize, Serialize};

use super::{check_layout, embedding_tensor, init_from_layout, Ctx, Params, Slot};
use crate::diffusion::{ImageTensor, NoisePredictor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_width: usize,
    /// Number of 2× downsampling levels.
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            base_width: 32,
            depth: 2,
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("image_size", self.image_size),
            ("base_width", self.base_width),
            ("depth", self.depth),
            ("time_embed_dim", self.time_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "must be positive"));
            }
        }
        if self.depth > 8 || self.image_size % (1 << self.depth) != 0 {
            return Err(Error::invalid(
                "image_size",
                format!("{} is not divisible by 2^depth = 2^{}", self.image_size, self.depth),
            ));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim", "must be even"));
        }
        Ok(())
    }

    /// Channel width at each resolution level, `depth + 1` entries.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width << l).collect()
    }

    fn block_slots(&self, name: &str, c_in: usize, c_out: usize) -> Vec<Slot> {
        let mut out = Vec::new();
        out.extend(Slot::conv(&format!("{name}.conv1"), c_out, c_in));
        out.extend(Slot::linear(&format!("{name}.temb"), c_out, self.time_embed_dim));
        out.extend(Slot::norm(&format!("{name}.norm1"), c_out));
        out.extend(Slot::conv(&format!("{name}.conv2"), c_out, c_out));
        out.extend(Slot::norm(&format!("{name}.norm2"), c_out));
        out
    }

    pub(crate) fn layout(&self) -> Vec<Slot> {
        let w = self.widths();
        let d = self.time_embed_dim;
        let mut slots = Vec::new();
        slots.extend(Slot::linear("time.fc1", d, d));
        slots.extend(Slot::linear("time.fc2", d, d));
        let mut c_prev = 1;
        for (l, &width) in w.iter().enumerate().take(self.depth) {
            slots.extend(self.block_slots(&format!("down{l}"), c_prev, width));
            c_prev = width;
        }
        slots.extend(self.block_slots("mid", c_prev, w[self.depth]));
        for l in (0..self.depth).rev() {
            slots.extend(self.block_slots(&format!("up{l}"), w[l + 1] + w[l], w[l]));
        }
        slots.extend(Slot::conv("out", 1, w[0]));
        slots
    }
}

/// Time-conditioned noise predictor ε_θ(x_t, t).
///
/// Encoder levels apply two 3×3 convolutions with group normalization and
/// SiLU, the time embedding added after the first convolution, then 2×
/// average pooling. The decoder mirrors this with nearest upsampling and
/// channel-concatenated skips.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Params,
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let params = init_from_layout(&config.layout(), &mut rng);
        Ok(Denoiser { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Params) -> Result<Self> {
        config.validate()?;
        check_layout(&config.layout(), &params)?;
        Ok(Denoiser { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize], ts: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                op: "denoiser_forward",
                expected: vec![shape.first().copied().unwrap_or(0), 1, s, s],
                got: shape.to_vec(),
            });
        }
        if ts.len() != shape[0] {
            return Err(Error::Shape {
                op: "denoiser timesteps",
                expected: vec![shape[0]],
                got: vec![ts.len()],
            });
        }
        Ok(())
    }

    /// Appends the network to `graph`. `bound` must come from
    /// `self.params().bind(graph, ..)`.
    pub fn forward<S: Real>(&self, graph: &mut Graph<S>, bound: &super::Bound, x: Var, ts: &[usize]) -> Result<Var> {
        self.check_input(graph.value(x).shape(), ts)?;
        let ctx = Ctx {
            params: &self.params,
            bound,
        };
        let emb = graph.constant(embedding_tensor(ts, self.config.time_embed_dim)?);
        let h = ctx.linear(graph, "time.fc1", emb)?;
        let h = graph.silu(h);
        let temb = ctx.linear(graph, "time.fc2", h)?;
        // Every block projection reads SiLU(temb).
        let temb = graph.silu(temb);

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for l in 0..self.config.depth {
            h = block(graph, &ctx, &format!("down{l}"), h, temb)?;
            skips.push(h);
            h = graph.avg_pool2(h)?;
        }
        h = block(graph, &ctx, "mid", h, temb)?;
        for l in (0..self.config.depth).rev() {
            h = graph.upsample2(h)?;
            h = graph.concat(h, skips[l])?;
            h = block(graph, &ctx, &format!("up{l}"), h, temb)?;
        }
        ctx.conv(graph, "out", h, 1)
    }

    /// Forward pass in precision `S` with parameters tracked for gradients.
    pub fn forward_graph<S: Real>(&self, graph: &mut Graph<S>, x: Var, ts: &[usize], trainable: bool) -> Result<(Var, super::Bound)> {
        let bound = self.params.bind(graph, trainable);
        let out = self.forward(graph, &bound, x, ts)?;
        Ok((out, bound))
    }
}

fn block<S: Real>(g: &mut Graph<S>, ctx: &Ctx, name: &str, x: Var, temb: Var) -> Result<Var> {
    let h = ctx.conv(g, &format!("{name}.conv1"), x, 1)?;
    let proj = ctx.linear(g, &format!("{name}.temb"), temb)?;
    let h = g.add_channel(h, proj)?;
    let h = ctx.norm(g, &format!("{name}.norm1"), h)?;
    let h = g.silu(h);
    let h = ctx.conv(g, &format!("{name}.conv2"), h, 1)?;
    let h = ctx.norm(g, &format!("{name}.norm2"), h)?;
    Ok(g.silu(h))
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &ImageTensor, ts: &[usize]) -> Result<ImageTensor> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(x_t.clone());
        let (out, _) = self.forward_graph(&mut g, x, ts, false)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn shape_preserving() {
        for config in [tiny(), DenoiserConfig::default()] {
            let s = config.image_size;
            let net = Denoiser::init(config, 1).unwrap();
            let x = Tensor::full(&[2, 1, s, s], 0.1);
            let y = net.predict(&x, &[3, 40]).unwrap();
            assert_eq!(y.shape(), &[2, 1, s, s]);
            assert!(y.all_finite());
            assert_eq!(y, net.predict(&x, &[3, 40]).unwrap());
        }
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let net = Denoiser::init(tiny(), 1).unwrap();
        assert!(net.predict(&Tensor::zeros(&[1, 1, 4, 4]), &[1]).is_err());
        assert!(net.predict(&Tensor::zeros(&[1, 2, 8, 8]), &[1]).is_err());
        assert!(net.predict(&Tensor::zeros(&[2, 1, 8, 8]), &[1]).is_err());
        let mut bad = tiny();
        bad.image_size = 6;
        assert!(Denoiser::init(bad, 0).is_err());
        let mut bad = tiny();
        bad.time_embed_dim = 7;
        assert!(Denoiser::init(bad, 0).is_err());
    }

    #[test]
    fn depends_on_timestep() {
        let net = Denoiser::init(tiny(), 4).unwrap();
        let x = Tensor::full(&[1, 1, 8, 8], 0.3);
        assert_ne!(net.predict(&x, &[1]).unwrap(), net.predict(&x, &[50]).unwrap());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let a = Denoiser::init(tiny(), 9).unwrap();
        let b = Denoiser::init(tiny(), 9).unwrap();
        let c = Denoiser::init(tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.params().iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(Denoiser::from_params(tiny(), a.params().clone()).is_ok());
        assert!(Denoiser::from_params(DenoiserConfig::default(), a.params().clone()).is_err());
    }
}
