//! Cross-scope spatial self-attention.
//!
//! The channels are split in half. Each half is cut into rectangular windows
//! (half 0 uses the transposed, tall orientation; half 1 the configured one).
//! Queries and values come from the window tokens through learned projections;
//! keys are shared by every window and are built by adaptive average and max
//! pooling of the whole half-map onto a grid of `h*w/2` cells each, so there are
//! exactly `h*w` keys. The halves are re-joined and linearly projected.

use super::{merge_heads, scaled_attention, split_heads};
use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use crate::windowing::{merge_var, partition_var, shift_var, WindowLayout};

/// Where the pooled keys are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyScope {
    /// Pool the whole half feature map; every window shares the keys.
    Global,
    /// Pool each window's own tokens (ablation).
    PerWindow,
}

impl KeyScope {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyScope::Global => "global",
            KeyScope::PerWindow => "window",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(KeyScope::Global),
            "window" => Ok(KeyScope::PerWindow),
            _ => Err(CstError::Config(format!("unknown key scope '{}'", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsaConfig {
    pub channels: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
    pub shifted: bool,
    pub key_scope: KeyScope,
}

/// Geometry of one channel half.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub shift: (usize, usize),
}

impl Branch {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

impl CsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(CstError::Config(format!("CSA channels {} must be even", self.channels)));
        }
        if self.heads == 0 || (self.channels / 2) % self.heads != 0 {
            return Err(CstError::Config(format!(
                "CSA half width {} not divisible by {} heads",
                self.channels / 2,
                self.heads
            )));
        }
        if self.win_h == 0 || self.win_w == 0 || self.win_w % 2 != 0 {
            return Err(CstError::Config(format!(
                "CSA window {}x{} needs positive dims and an even width",
                self.win_h, self.win_w
            )));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    pub fn head_dim(&self) -> usize {
        self.half() / self.heads
    }

    pub fn branch(&self, index: usize) -> Branch {
        let (rows, cols, grid_h, grid_w) = if index == 0 {
            (self.win_w, self.win_h, self.win_w / 2, self.win_h)
        } else {
            (self.win_h, self.win_w, self.win_h, self.win_w / 2)
        };
        let shift = if self.shifted { (rows / 2, cols / 2) } else { (0, 0) };
        Branch {
            index,
            rows,
            cols,
            grid_h,
            grid_w,
            shift,
        }
    }

    pub fn branches(&self) -> [Branch; 2] {
        [self.branch(0), self.branch(1)]
    }
}

pub fn csa_param_specs(prefix: &str, cfg: &CsaConfig) -> Vec<ParamSpec> {
    let half = cfg.half();
    let mut specs = Vec::new();
    for br in cfg.branches() {
        let t = br.tokens();
        specs.push(ParamSpec::new(
            format!("{}.wq{}", prefix, br.index),
            &[half, half],
            Init::TruncNormal(0.02),
        ));
        specs.push(ParamSpec::new(
            format!("{}.wv{}", prefix, br.index),
            &[half, half],
            Init::TruncNormal(0.02),
        ));
        specs.push(ParamSpec::new(
            format!("{}.rpb{}", prefix, br.index),
            &[cfg.heads, t, t],
            Init::TruncNormal(0.02),
        ));
    }
    specs.push(ParamSpec::new(
        format!("{}.proj.w", prefix),
        &[cfg.channels, cfg.channels],
        Init::TruncNormal(0.02),
    ));
    specs.push(ParamSpec::new(
        format!("{}.proj.b", prefix),
        &[cfg.channels],
        Init::Zeros,
    ));
    specs
}

fn channel_slice(g: &mut Graph, x: Var, c0: usize, count: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(h * w * count);
    for p in 0..h * w {
        idx.extend(p * c + c0..p * c + c0 + count);
    }
    g.gather(&[x], idx, &[h, w, count])
}

/// Concatenates equally shaped `[H, W, c]` maps along channels.
fn channel_concat(g: &mut Graph, parts: &[Var]) -> Var {
    let s = g.shape(parts[0]).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let n = h * w * c;
    let mut idx = Vec::with_capacity(n * parts.len());
    for p in 0..h * w {
        for k in 0..parts.len() {
            idx.extend(k * n + p * c..k * n + (p + 1) * c);
        }
    }
    g.gather(parts, idx, &[h, w, c * parts.len()])
}

/// `[1, h*w, c]` keys pooled from the whole map, average cells first.
fn global_keys(g: &mut Graph, x: Var, br: &Branch) -> Var {
    let c = g.shape(x)[2];
    let avg = g.adaptive_avg_pool(x, br.grid_h, br.grid_w);
    let max = g.adaptive_max_pool(x, br.grid_h, br.grid_w);
    let cells = br.grid_h * br.grid_w;
    g.gather(&[avg, max], (0..2 * cells * c).collect(), &[1, 2 * cells, c])
}

/// `[N, h*w, c]` keys pooled from each window of the edge-padded map.
fn window_keys(g: &mut Graph, x: Var, br: &Branch, layout: &WindowLayout) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ph, pw) = (layout.grid_h * br.rows, layout.grid_w * br.cols);
    let mut idx = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        for xx in 0..pw {
            let base = (y.min(h - 1) * w + xx.min(w - 1)) * c;
            idx.extend(base..base + c);
        }
    }
    let padded = g.gather(&[x], idx, &[ph, pw, c]);
    let (gh, gw) = (layout.grid_h * br.grid_h, layout.grid_w * br.grid_w);
    let avg = g.adaptive_avg_pool(padded, gh, gw);
    let max = g.adaptive_max_pool(padded, gh, gw);
    let cells = br.grid_h * br.grid_w;
    let plane = gh * gw * c;
    let mut kidx = Vec::with_capacity(layout.n_windows * 2 * cells * c);
    for wy in 0..layout.grid_h {
        for wx in 0..layout.grid_w {
            for src in 0..2 {
                for cy in 0..br.grid_h {
                    for cx in 0..br.grid_w {
                        let cell = (wy * br.grid_h + cy) * gw + wx * br.grid_w + cx;
                        let base = src * plane + cell * c;
                        kidx.extend(base..base + c);
                    }
                }
            }
        }
    }
    g.gather(&[avg, max], kidx, &[layout.n_windows, 2 * cells, c])
}

fn branch_forward(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CsaConfig, br: &Branch, half: Var) -> Var {
    let (dy, dx) = (br.shift.0 as isize, br.shift.1 as isize);
    let xs = shift_var(g, half, -dy, -dx);
    let (windows, layout) = partition_var(g, xs, br.rows, br.cols);
    let keys = match cfg.key_scope {
        KeyScope::Global => global_keys(g, xs, br),
        KeyScope::PerWindow => window_keys(g, xs, br, &layout),
    };
    let prev = g.set_tag("csa.proj_qv");
    let q = g.linear(windows, p.get(&format!("{}.wq{}", prefix, br.index)), None);
    let v = g.linear(windows, p.get(&format!("{}.wv{}", prefix, br.index)), None);
    let qh = split_heads(g, q, cfg.heads);
    let kh = split_heads(g, keys, cfg.heads);
    let vh = split_heads(g, v, cfg.heads);
    g.set_tag("csa.attention");
    let bias = p.get(&format!("{}.rpb{}", prefix, br.index));
    let out = scaled_attention(g, qh, kh, vh, Some(bias), cfg.head_dim());
    g.set_tag(prev);
    let out = merge_heads(g, out, cfg.heads);
    let merged = merge_var(g, out, &layout);
    shift_var(g, merged, dy, dx)
}

/// Cross-scope spatial attention on an `[H, W, C]` map recorded on `g`.
pub fn csa_forward(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CsaConfig, x: Var) -> Var {
    let half = cfg.half();
    let outs: Vec<Var> = cfg
        .branches()
        .iter()
        .map(|br| {
            let xh = channel_slice(g, x, br.index * half, half);
            branch_forward(g, p, prefix, cfg, br, xh)
        })
        .collect();
    let joined = channel_concat(g, &outs);
    let prev = g.set_tag("csa.proj_out");
    let y = g.linear(
        joined,
        p.get(&format!("{}.proj.w", prefix)),
        Some(p.get(&format!("{}.proj.b", prefix))),
    );
    g.set_tag(prev);
    y
}

/// Evaluates [`csa_forward`] on a plain tensor.
pub fn csa_forward_eval(x: &Tensor, store: &ParamStore, prefix: &str, cfg: &CsaConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape().len() != 3 || x.shape()[2] != cfg.channels {
        return Err(CstError::Config(format!(
            "CSA expects [H, W, {}], got {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = csa_forward(&mut g, &p, prefix, cfg, xv);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, wh: usize, ww: usize, heads: usize, shifted: bool) -> CsaConfig {
        CsaConfig {
            channels: c,
            win_h: wh,
            win_w: ww,
            heads,
            shifted,
            key_scope: KeyScope::Global,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 2, 4, 2, false).validate().is_ok());
        assert!(cfg(7, 2, 4, 1, false).validate().is_err());
        assert!(cfg(8, 2, 3, 1, false).validate().is_err());
        assert!(cfg(8, 2, 4, 3, false).validate().is_err());
    }

    #[test]
    fn full_window_has_32_keys() {
        let c = cfg(180, 2, 16, 6, false);
        for br in c.branches() {
            assert_eq!(2 * br.grid_h * br.grid_w, 32);
            assert_eq!(br.tokens(), 32);
        }
        assert_eq!((c.branch(0).rows, c.branch(0).cols), (16, 2));
        assert_eq!(c.head_dim(), 15);
    }

    #[test]
    fn pooled_keys_on_2x2_map() {
        // values {0,1;2,3}; vertical branch of a 2x2 window pools to a 2x1 grid... the
        // configured branch (rows 2, cols 2) uses grid 2x1: left/right halves are
        // the columns, so cells are rows here.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]));
        let c = cfg(2, 2, 2, 1, false);
        let br = c.branch(1);
        assert_eq!((br.grid_h, br.grid_w), (2, 1));
        let k = global_keys(&mut g, x, &br);
        // avg of rows: 0.5, 2.5 ; max of rows: 1, 3
        assert_eq!(g.value(k).data(), &[0.5, 2.5, 1.0, 3.0]);
        let br0 = c.branch(0);
        assert_eq!((br0.grid_h, br0.grid_w), (1, 2));
        let k0 = global_keys(&mut g, x, &br0);
        // avg of columns: 1, 2 ; max of columns: 2, 3
        assert_eq!(g.value(k0).data(), &[1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_input_passes_through() {
        let c = cfg(4, 2, 4, 2, true);
        let mut store = ParamStore::from_specs(&csa_param_specs("a", &c), 1).unwrap();
        for name in ["a.wq0", "a.wv0", "a.wq1", "a.wv1"] {
            let v = store.value_mut(name);
            v.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..2 {
                v[i * 2 + i] = 1.0;
            }
        }
        store.zero_prefix("a.rpb");
        let pw = store.value_mut("a.proj.w");
        pw.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..4 {
            pw[i * 4 + i] = 1.0;
        }
        let row = [0.3, -1.2, 0.8, 2.0];
        let x = Tensor::from_fn(&[5, 7, 4], |i| row[i % 4]);
        let y = csa_forward_eval(&x, &store, "a", &c).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn shape_preserved_for_ragged_maps() {
        let c = cfg(8, 2, 4, 2, true);
        let store = ParamStore::from_specs(&csa_param_specs("a", &c), 2).unwrap();
        for (h, w) in [(4, 4), (5, 3), (7, 9), (1, 1)] {
            let x = Tensor::from_fn(&[h, w, 8], |i| (i as f64 * 0.37).sin());
            let y = csa_forward_eval(&x, &store, "a", &c).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let c = cfg(8, 2, 4, 2, false);
        let store = ParamStore::from_specs(&csa_param_specs("a", &c), 2).unwrap();
        let x = Tensor::zeros(&[4, 4, 6]);
        assert!(matches!(
            csa_forward_eval(&x, &store, "a", &c),
            Err(CstError::Config(_))
        ));
    }
}
