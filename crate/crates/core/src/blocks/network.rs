use std::collections::BTreeMap;

use super::config::{AttnKind, CaPlacement, CstConfig};
use super::layers::{conv, stage_forward, stage_specs};
use crate::attention::{flops_csa, flops_cse};
use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::hsi::resize_tensor;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

fn pixel_shuffle_index(h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let co = c / (r * r);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h * r {
        for x in 0..w * r {
            let (sy, i, sx, j) = (y / r, y % r, x / r, x % r);
            for k in 0..co {
                idx.push((sy * w + sx) * c + k * r * r + i * r + j);
            }
        }
    }
    idx
}

fn check_shuffle(shape: &[usize], r: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 || r == 0 || shape[2] % (r * r) != 0 {
        return Err(CstError::Geometry(format!(
            "pixel shuffle by {} needs channels divisible by {}, got {:?}",
            r,
            r * r,
            shape
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Depth-to-space: channel `k*r*r + i*r + j` of pixel `(y, x)` moves to
/// channel `k` of pixel `(y*r + i, x*r + j)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = check_shuffle(x.shape(), r)?;
    let d = x.data();
    let data = pixel_shuffle_index(h, w, c, r).into_iter().map(|i| d[i]).collect();
    Ok(Tensor::new(vec![h * r, w * r, c / (r * r)], data))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || r == 0 || s[0] % r != 0 || s[1] % r != 0 {
        return Err(CstError::Geometry(format!("cannot unshuffle {:?} by {}", s, r)));
    }
    let (h, w, co) = (s[0] / r, s[1] / r, s[2]);
    let idx = pixel_shuffle_index(h, w, co * r * r, r);
    let mut out = vec![0.0; x.len()];
    for (dst, src) in idx.into_iter().enumerate() {
        out[src] = x.data()[dst];
    }
    Ok(Tensor::new(vec![h, w, co * r * r], out))
}

pub fn pixel_shuffle_var(g: &mut Graph, x: Var, r: usize) -> Var {
    let (h, w, c) = check_shuffle(g.shape(x), r).expect("pixel shuffle geometry");
    g.gather(&[x], pixel_shuffle_index(h, w, c, r), &[h * r, w * r, c / (r * r)])
}

/// Every learnable parameter of the network, in forward order.
pub fn param_specs(cfg: &CstConfig) -> Vec<ParamSpec> {
    let (b, c) = (cfg.bands, cfg.channels);
    let mut s = ParamSpec::conv("head", b, c, 3, 1).to_vec();
    for i in 0..cfg.stages {
        s.extend(stage_specs(&format!("s{}", i), cfg));
    }
    s.extend(ParamSpec::conv("body", c, c, 3, 1));
    for k in 0..cfg.upsample_steps() {
        s.extend(ParamSpec::conv(&format!("up{}", k), c, 4 * c, 3, 1));
    }
    let [mut tw, tb] = ParamSpec::conv("tail", c, b, 3, 1);
    // the trunk starts as a small correction on top of the bicubic skip
    tw.init = Init::ScaledFanIn(c * 9, TAIL_GAIN);
    s.extend([tw, tb]);
    s.push(ParamSpec::new("final.w", &[b, b, 3, 3], Init::IdentityConv(1e-3)));
    s.push(ParamSpec::new("final.b", &[b], Init::Zeros));
    s
}

pub fn param_count(cfg: &CstConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Freshly initialized parameters seeded from `cfg.seed`.
/// Init gain of the last trunk conv.
pub const TAIL_GAIN: f64 = 0.1;

pub fn init_params(cfg: &CstConfig) -> Result<ParamStore> {
    cfg.validate()?;
    ParamStore::from_specs(&param_specs(cfg), cfg.seed)
}

/// Checks that `store` holds exactly the parameters `cfg` calls for.
pub fn check_params(cfg: &CstConfig, store: &ParamStore) -> Result<()> {
    let specs = param_specs(cfg);
    if specs.len() != store.len() {
        return Err(CstError::Validation(format!(
            "config needs {} parameters, store has {}",
            specs.len(),
            store.len()
        )));
    }
    for s in &specs {
        match store.get(&s.name) {
            Some(p) if p.shape == s.shape => {}
            Some(p) => {
                return Err(CstError::Validation(format!(
                    "parameter '{}' has shape {:?}, config expects {:?}",
                    s.name, p.shape, s.shape
                )))
            }
            None => return Err(CstError::Validation(format!("missing parameter '{}'", s.name))),
        }
    }
    Ok(())
}

fn check_input(cfg: &CstConfig, lr: &Tensor) -> Result<(usize, usize)> {
    let s = lr.shape();
    if s.len() != 3 || s[2] != cfg.bands {
        return Err(CstError::Config(format!(
            "model expects [H, W, {}] input, got {:?}",
            cfg.bands, s
        )));
    }
    Ok((s[0], s[1]))
}

/// Super-resolves an `[H, W, B]` input to `[sH, sW, B]` on the tape.
pub fn cst_forward(g: &mut Graph, p: &crate::params::Bound, cfg: &CstConfig, lr: &Tensor) -> Result<Var> {
    let (h, w) = check_input(cfg, lr)?;
    let s = cfg.scale;
    let up = g.leaf(resize_tensor(lr, s * h, s * w)?);
    let x = g.leaf(lr.clone());
    let prev = g.set_tag("head");
    let f0 = conv(g, p, "head", x, 1);
    g.set_tag(prev.clone());
    let mut f = f0;
    for i in 0..cfg.stages {
        f = stage_forward(g, p, &format!("s{}", i), cfg, f);
    }
    let f = g.add(f, f0);
    g.set_tag("body");
    let mut f = conv(g, p, "body", f, 1);
    g.set_tag("upsample");
    for k in 0..cfg.upsample_steps() {
        f = conv(g, p, &format!("up{}", k), f, 1);
        f = pixel_shuffle_var(g, f, 2);
    }
    g.set_tag("tail");
    let f = conv(g, p, "tail", f, 1);
    let f = g.add(f, up);
    g.set_tag("final");
    let y = conv(g, p, "final", f, 1);
    g.set_tag(prev);
    Ok(y)
}

/// Forward pass outside of training.
pub fn cst_infer(store: &ParamStore, cfg: &CstConfig, lr: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let y = cst_forward(&mut g, &p, cfg, lr)?;
    let out = g.value(y).clone();
    if !out.is_finite() {
        return Err(CstError::Numeric("non-finite network output".into()));
    }
    Ok(out)
}

/// Closed-form MACs of one forward pass on an `h x w` input, itemized by the
/// same tags the tape uses.
pub fn model_macs(cfg: &CstConfig, h: usize, w: usize) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = BTreeMap::new();
    let mut add = |k: &str, v: u64| *m.entry(k.to_string()).or_insert(0) += v;
    let (b, c) = (cfg.bands as u64, cfg.channels as u64);
    let hw = (h * w) as u64;
    let e = c * cfg.ffn_expansion as u64;
    let r = cfg.ca_width() as u64;
    add("head", hw * b * c * 9);
    for _ in 0..cfg.stages {
        for _ in 0..cfg.layers_per_stage {
            for kind in cfg.variant.kernels() {
                match kind {
                    AttnKind::Csa => {
                        let f = flops_csa(h, w, cfg.channels, cfg.win_h, cfg.win_w);
                        add("csa.proj_qv", f.proj_qv);
                        add("csa.attention", f.attention());
                        add("csa.proj_out", f.proj_out);
                    }
                    AttnKind::Cse => {
                        let f = flops_cse(h, w, &cfg.cse());
                        add("cse.qk_reduce", f.qk_reduce);
                        add("cse.value", f.value);
                        add("cse.attention_map", f.attention_map);
                        add("cse.apply", f.apply);
                        add("cse.proj", f.proj);
                    }
                }
            }
            if cfg.ca_placement == CaPlacement::Layer {
                add("ca", 2 * c * r);
            }
            add("cfn", 2 * (hw * c * 9 + hw * c * e) + hw * e * c);
        }
        if cfg.ca_placement == CaPlacement::Stage {
            add("ca", 2 * c * r);
        }
        add("stage_conv", hw * c * c * 9);
    }
    add("body", hw * c * c * 9);
    let mut side = hw;
    for _ in 0..cfg.upsample_steps() {
        add("upsample", side * 4 * c * c * 9);
        side *= 4;
    }
    add("tail", side * c * b * 9);
    add("final", side * b * b * 9);
    m
}

pub fn total_macs(cfg: &CstConfig, h: usize, w: usize) -> u64 {
    model_macs(cfg, h, w).values().sum()
}
