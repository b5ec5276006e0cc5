//! Cross-scope spectral self-attention.
//!
//! Attention runs along the channel axis. Queries and keys are reduced both
//! spatially (stride-2 depth-wise 3x3) and spectrally (point-wise to `C_r`), so
//! the per-head attention map is `d x d` with `d = C_r / heads` and its cost is
//! linear in the reduced spatial size. Values are a full-resolution point-wise
//! projection to `C_r`; a final point-wise conv restores `C` channels.

use super::{merge_heads, split_heads};
use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CseConfig {
    pub channels: usize,
    pub heads: usize,
    pub reduce_spatial: usize,
    pub reduce_channels: usize,
}

impl CseConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        CseConfig {
            channels,
            heads,
            reduce_spatial: 2,
            reduce_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("spatial", self.reduce_spatial), ("channel", self.reduce_channels)] {
            if f != 1 && f != 2 {
                return Err(CstError::Config(format!("CSE {} reduction {} must be 1 or 2", name, f)));
            }
        }
        if self.channels == 0 || self.channels % self.reduce_channels != 0 {
            return Err(CstError::Config(format!(
                "CSE channels {} not divisible by reduction {}",
                self.channels, self.reduce_channels
            )));
        }
        if self.heads == 0 || self.reduced_channels() % self.heads != 0 {
            return Err(CstError::Config(format!(
                "CSE reduced width {} not divisible by {} heads",
                self.reduced_channels(),
                self.heads
            )));
        }
        Ok(())
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.reduce_channels
    }

    pub fn head_dim(&self) -> usize {
        self.reduced_channels() / self.heads
    }

    /// Reduced spatial size for an `h x w` input.
    pub fn reduced_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.reduce_spatial;
        ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1)
    }
}

pub fn cse_param_specs(prefix: &str, cfg: &CseConfig) -> Vec<ParamSpec> {
    let (c, cr) = (cfg.channels, cfg.reduced_channels());
    let mut specs = Vec::new();
    for which in ["q", "k"] {
        specs.extend(ParamSpec::conv(&format!("{}.{}_dw", prefix, which), c, c, 3, c));
        specs.extend(ParamSpec::conv(&format!("{}.{}_pw", prefix, which), c, cr, 1, 1));
    }
    specs.extend(ParamSpec::conv(&format!("{}.v", prefix), c, cr, 1, 1));
    specs.extend(ParamSpec::conv(&format!("{}.proj", prefix), cr, c, 1, 1));
    specs
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize, pad: usize, groups: usize) -> Var {
    let w = p.get(&format!("{}.w", name));
    let b = p.get(&format!("{}.b", name));
    g.conv2d(x, w, Some(b), stride, pad, groups)
}

fn reduced(g: &mut Graph, p: &Bound, prefix: &str, which: &str, cfg: &CseConfig, x: Var) -> Var {
    let c = cfg.channels;
    let dw = conv(g, p, &format!("{}.{}_dw", prefix, which), x, cfg.reduce_spatial, 1, c);
    conv(g, p, &format!("{}.{}_pw", prefix, which), dw, 1, 0, 1)
}

/// Returns the output map and the `[heads, d, d]` attention maps.
pub fn cse_forward_traced(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CseConfig, x: Var) -> (Var, Var) {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[0], s[1]);
    let cr = cfg.reduced_channels();
    let d = cfg.head_dim();
    let prev = g.set_tag("cse.qk_reduce");
    let q = reduced(g, p, prefix, "q", cfg, x);
    let k = reduced(g, p, prefix, "k", cfg, x);
    g.set_tag("cse.value");
    let v = conv(g, p, &format!("{}.v", prefix), x, 1, 0, 1);
    let (hr, wr) = (g.shape(q)[0], g.shape(q)[1]);
    let q = g.reshape(q, &[1, hr * wr, cr]);
    let k = g.reshape(k, &[1, hr * wr, cr]);
    let v = g.reshape(v, &[1, h * w, cr]);
    let (qh, kh, vh) = (
        split_heads(g, q, cfg.heads),
        split_heads(g, k, cfg.heads),
        split_heads(g, v, cfg.heads),
    );
    g.set_tag("cse.attention_map");
    let scores = g.bmm(qh, kh, true, false);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores);
    g.set_tag("cse.apply");
    let out = g.bmm(vh, attn, false, true);
    let out = merge_heads(g, out, cfg.heads);
    let out = g.reshape(out, &[h, w, cr]);
    g.set_tag("cse.proj");
    let y = conv(g, p, &format!("{}.proj", prefix), out, 1, 0, 1);
    g.set_tag(prev);
    (y, attn)
}

/// Cross-scope spectral attention on an `[H, W, C]` map recorded on `g`.
pub fn cse_forward(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CseConfig, x: Var) -> Var {
    cse_forward_traced(g, p, prefix, cfg, x).0
}

/// Evaluates [`cse_forward`] on a plain tensor.
pub fn cse_forward_eval(x: &Tensor, store: &ParamStore, prefix: &str, cfg: &CseConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape().len() != 3 || x.shape()[2] != cfg.channels {
        return Err(CstError::Config(format!(
            "CSE expects [H, W, {}], got {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = cse_forward(&mut g, &p, prefix, cfg, xv);
    Ok(g.value(y).clone())
}
