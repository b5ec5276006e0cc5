//! Slow scalar-loop references for the attention kernels and blocks, a
//! finite-difference gradient checker, and a MAC counter for traced runs.
//!
//! Nothing here goes through the tape: every reference reads raw parameter
//! values by name and loops over explicit indices.

use std::collections::BTreeMap;

use crate::attention::{CsaConfig, CsaMacs, CseConfig, CseMacs, KeyScope};
use crate::blocks::{AttnKind, CaPlacement, CstConfig, LN_EPS};
use crate::error::{CstError, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Largest spatial side the references accept.
pub const ORACLE_MAX_SIDE: usize = 32;

fn guard(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != channels {
        return Err(CstError::Config(format!("expected [H, W, {}], got {:?}", channels, s)));
    }
    if s[0] > ORACLE_MAX_SIDE || s[1] > ORACLE_MAX_SIDE {
        return Err(CstError::Validation(format!(
            "oracle limited to {}x{} maps, got {}x{}",
            ORACLE_MAX_SIDE, ORACLE_MAX_SIDE, s[0], s[1]
        )));
    }
    Ok((s[0], s[1]))
}

fn softmax_in_place(row: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Cell `i` of `bins` equal-ish cells over `len` samples: `[floor(i*len/bins), ceil((i+1)*len/bins))`.
fn cell(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let lo = i * len / bins;
    let mut hi = (i + 1) * len / bins;
    if (i + 1) * len % bins != 0 {
        hi += 1;
    }
    (lo, hi)
}

/// Avg cells then max cells of a `rows x cols` map of `c`-vectors, on a `gh x gw` grid.
fn pool_tokens(map: &[Vec<f64>], rows: usize, cols: usize, gh: usize, gw: usize) -> Vec<Vec<f64>> {
    let c = map[0].len();
    let mut avg = Vec::new();
    let mut max = Vec::new();
    for i in 0..gh {
        let (y0, y1) = cell(i, rows, gh);
        for j in 0..gw {
            let (x0, x1) = cell(j, cols, gw);
            let mut a = vec![0.0; c];
            let mut m = vec![f64::NEG_INFINITY; c];
            for y in y0..y1 {
                for x in x0..x1 {
                    for k in 0..c {
                        let v = map[y * cols + x][k];
                        a[k] += v;
                        if v > m[k] {
                            m[k] = v;
                        }
                    }
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            avg.push(a.into_iter().map(|v| v / n).collect());
            max.push(m);
        }
    }
    avg.extend(max);
    avg
}

fn param<'a>(store: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    store
        .get(name)
        .map(|p| p.value.as_slice())
        .ok_or_else(|| CstError::Config(format!("missing parameter '{}'", name)))
}

/// Reference CSA. `order` optionally permutes the window processing order of both
/// branches (indices into the row-major window list).
pub fn naive_csa(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &CsaConfig,
    order: Option<&[usize]>,
) -> Result<(Tensor, CsaMacs)> {
    cfg.validate()?;
    let (h, w) = guard(x, cfg.channels)?;
    let c = cfg.channels;
    let half = c / 2;
    let d = half / cfg.heads;
    let mut macs = CsaMacs::default();
    let mut joined = vec![vec![0.0; c]; h * w];

    for b in 0..2 {
        // orientation: half 0 tall windows, half 1 the configured shape
        let (rows, cols) = if b == 0 {
            (cfg.win_w, cfg.win_h)
        } else {
            (cfg.win_h, cfg.win_w)
        };
        let (gh, gw) = if b == 0 { (rows / 2, cols) } else { (rows, cols / 2) };
        let (dy, dx) = if cfg.shifted { (rows / 2, cols / 2) } else { (0, 0) };
        let t = rows * cols;

        // rolled half map: xs[y][x] = x_half[(y + dy) % h][(x + dx) % w]
        let mut xs = vec![vec![0.0; half]; h * w];
        for y in 0..h {
            for xx in 0..w {
                let src = ((y + dy) % h) * w + (xx + dx) % w;
                for k in 0..half {
                    xs[y * w + xx][k] = x.data()[src * c + b * half + k];
                }
            }
        }

        let nwy = h.div_ceil(rows);
        let nwx = w.div_ceil(cols);
        let n_win = nwy * nwx;
        let global_keys = if cfg.key_scope == KeyScope::Global {
            Some(pool_tokens(&xs, h, w, gh, gw))
        } else {
            None
        };
        let wq = param(store, &format!("{}.wq{}", prefix, b))?;
        let wv = param(store, &format!("{}.wv{}", prefix, b))?;
        let bias = param(store, &format!("{}.rpb{}", prefix, b))?;

        let default_order: Vec<usize> = (0..n_win).collect();
        let order = order.unwrap_or(&default_order);
        if order.len() != n_win {
            return Err(CstError::Config(format!(
                "window order of {} for {} windows",
                order.len(),
                n_win
            )));
        }
        let mut merged = vec![vec![0.0; half]; h * w];
        for &win in order {
            let (wy, wx) = (win / nwx, win % nwx);
            let mut tokens = Vec::with_capacity(t);
            let mut pos = Vec::with_capacity(t);
            for ty in 0..rows {
                for tx in 0..cols {
                    let (py, px) = (wy * rows + ty, wx * cols + tx);
                    tokens.push(xs[py.min(h - 1) * w + px.min(w - 1)].clone());
                    pos.push((py, px));
                }
            }
            let keys = match &global_keys {
                Some(k) => k.clone(),
                None => pool_tokens(&tokens, rows, cols, gh, gw),
            };
            let mut q = vec![vec![0.0; half]; t];
            let mut v = vec![vec![0.0; half]; t];
            for i in 0..t {
                for j in 0..half {
                    let (mut sq, mut sv) = (0.0, 0.0);
                    for k in 0..half {
                        sq += tokens[i][k] * wq[k * half + j];
                        sv += tokens[i][k] * wv[k * half + j];
                        macs.proj_qv += 2;
                    }
                    q[i][j] = sq;
                    v[i][j] = sv;
                }
            }
            let mut out = vec![vec![0.0; half]; t];
            for hd in 0..cfg.heads {
                for i in 0..t {
                    let mut row = vec![0.0; keys.len()];
                    for (s, key) in keys.iter().enumerate() {
                        let mut dot = 0.0;
                        for e in 0..d {
                            dot += q[i][hd * d + e] * key[hd * d + e];
                            macs.scores += 1;
                        }
                        row[s] = dot / (d as f64).sqrt() + bias[(hd * t + i) * t + s];
                    }
                    softmax_in_place(&mut row);
                    for e in 0..d {
                        let mut acc = 0.0;
                        for (s, a) in row.iter().enumerate() {
                            acc += a * v[s][hd * d + e];
                            macs.apply += 1;
                        }
                        out[i][hd * d + e] = acc;
                    }
                }
            }
            for (i, &(py, px)) in pos.iter().enumerate() {
                if py < h && px < w {
                    merged[py * w + px] = out[i].clone();
                }
            }
        }
        // undo the roll
        for y in 0..h {
            for xx in 0..w {
                let src = ((y + h - dy % h) % h) * w + (xx + w - dx % w) % w;
                for k in 0..half {
                    joined[y * w + xx][b * half + k] = merged[src][k];
                }
            }
        }
    }

    let pw = param(store, &format!("{}.proj.w", prefix))?;
    let pb = param(store, &format!("{}.proj.b", prefix))?;
    let mut y = vec![0.0; h * w * c];
    for p in 0..h * w {
        for j in 0..c {
            let mut s = pb[j];
            for i in 0..c {
                s += joined[p][i] * pw[i * c + j];
                macs.proj_out += 1;
            }
            y[p * c + j] = s;
        }
    }
    Ok((Tensor::new(vec![h, w, c], y), macs))
}

/// `[H, W, Cin]` conv with weight `[Cout, Cin/groups, k, k]`, zero padding `k/2`.
/// Every tap is counted, padded ones included.
fn naive_conv(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    wt: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    groups: usize,
    macs: &mut u64,
) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let grp = o / cout_g;
                let mut s = bias[o];
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            *macs += 1;
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xi = x[(iy as usize * w + ix as usize) * cin + grp * cin_g + ci];
                            s += xi * wt[((o * cin_g + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = s;
            }
        }
    }
    (out, oh, ow)
}

fn conv_named(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    dims: (usize, usize, usize),
    stride: usize,
    groups: usize,
    macs: &mut u64,
) -> Result<(Vec<f64>, usize, usize, usize)> {
    let p = store
        .get(&format!("{}.w", name))
        .ok_or_else(|| CstError::Config(format!("missing parameter '{}.w'", name)))?;
    let (cout, k) = (p.shape[0], p.shape[2]);
    let bias = param(store, &format!("{}.b", name))?;
    let (out, oh, ow) = naive_conv(x, dims, &p.value, bias, cout, k, stride, groups, macs);
    Ok((out, oh, ow, cout))
}

/// Reference CSE output, MAC tally and the `heads` attention maps (`d x d` each, row-major).
pub fn naive_cse(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &CseConfig,
) -> Result<(Tensor, CseMacs, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let (h, w) = guard(x, cfg.channels)?;
    let c = cfg.channels;
    let cr = cfg.reduced_channels();
    let d = cr / cfg.heads;
    let mut macs = CseMacs::default();
    let dims = (h, w, c);

    let mut reduced = Vec::new();
    let (mut hr, mut wr) = (0, 0);
    for which in ["q", "k"] {
        let (dw, oh, ow, _) = conv_named(
            store,
            &format!("{}.{}_dw", prefix, which),
            x.data(),
            dims,
            cfg.reduce_spatial,
            c,
            &mut macs.qk_reduce,
        )?;
        let (pw, _, _, _) = conv_named(
            store,
            &format!("{}.{}_pw", prefix, which),
            &dw,
            (oh, ow, c),
            1,
            1,
            &mut macs.qk_reduce,
        )?;
        reduced.push(pw);
        hr = oh;
        wr = ow;
    }
    let (q, k) = (&reduced[0], &reduced[1]);
    let (v, _, _, _) = conv_named(store, &format!("{}.v", prefix), x.data(), dims, 1, 1, &mut macs.value)?;

    let mut maps = Vec::with_capacity(cfg.heads);
    let mut out = vec![0.0; h * w * cr];
    for hd in 0..cfg.heads {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for p in 0..hr * wr {
                    s += q[p * cr + hd * d + i] * k[p * cr + hd * d + j];
                    macs.attention_map += 1;
                }
                a[i * d + j] = s / (d as f64).sqrt();
            }
            softmax_in_place(&mut a[i * d..(i + 1) * d]);
        }
        for p in 0..h * w {
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += a[i * d + j] * v[p * cr + hd * d + j];
                    macs.apply += 1;
                }
                out[p * cr + hd * d + i] = s;
            }
        }
        maps.push(a);
    }
    let (y, _, _, _) = conv_named(
        store,
        &format!("{}.proj", prefix),
        &out,
        (h, w, cr),
        1,
        1,
        &mut macs.proj,
    )?;
    Ok((Tensor::new(vec![h, w, c], y), macs, maps))
}

/// Reference gated feed-forward block under `prefix` (`dw1, pw1, dw2, pw2, out`).
pub fn naive_cfn(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut m = 0;
    let mut branch = |i: usize| -> Result<(Vec<f64>, usize)> {
        let (dw, _, _, _) = conv_named(store, &format!("{}.dw{}", prefix, i), x.data(), (h, w, c), 1, c, &mut m)?;
        let (pw, _, _, ce) = conv_named(store, &format!("{}.pw{}", prefix, i), &dw, (h, w, c), 1, 1, &mut m)?;
        Ok((pw, ce))
    };
    let (a, ce) = branch(1)?;
    let (b, _) = branch(2)?;
    let gated: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&u, &v)| 0.5 * u * (1.0 + libm::erf(u / std::f64::consts::SQRT_2)) * v)
        .collect();
    let (y, _, _, _) = conv_named(store, &format!("{}.out", prefix), &gated, (h, w, ce), 1, 1, &mut m)?;
    Ok(Tensor::new(vec![h, w, c], y))
}

/// Reference squeeze-and-excitation channel attention under `prefix` (`down`, `up`).
pub fn naive_channel_attention(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut mean = vec![0.0; c];
    for p in 0..h * w {
        for k in 0..c {
            mean[k] += x.data()[p * c + k];
        }
    }
    mean.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let mut m = 0;
    let (z, _, _, _) = conv_named(store, &format!("{}.down", prefix), &mean, (1, 1, c), 1, 1, &mut m)?;
    let z: Vec<f64> = z.into_iter().map(|v| v.max(0.0)).collect();
    let r = z.len();
    let (e, _, _, _) = conv_named(store, &format!("{}.up", prefix), &z, (1, 1, r), 1, 1, &mut m)?;
    let gate: Vec<f64> = e.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    Ok(Tensor::from_fn(&[h, w, c], |i| x.data()[i] * gate[i % c]))
}

/// Reference per-pixel layer norm with the `{prefix}.g`, `{prefix}.b` affine.
pub fn naive_layer_norm(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    let g = param(store, &format!("{}.g", prefix))?;
    let b = param(store, &format!("{}.b", prefix))?;
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.data().chunks(c).enumerate() {
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= c as f64;
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) / (var + LN_EPS).sqrt() * g[j] + b[j];
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out))
}

fn plus(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// Reference transformer layer for any variant, built from the block references.
pub fn naive_layer(x: &Tensor, store: &ParamStore, prefix: &str, cfg: &CstConfig, shifted: bool) -> Result<Tensor> {
    let mut z = naive_layer_norm(x, store, &format!("{}.ln1", prefix))?;
    for (i, kind) in cfg.variant.kernels().iter().enumerate() {
        let name = format!("{}.att{}", prefix, i);
        z = match kind {
            AttnKind::Csa => naive_csa(&z, store, &name, &cfg.csa(shifted), None)?.0,
            AttnKind::Cse => naive_cse(&z, store, &name, &cfg.cse())?.0,
        };
    }
    let mut x1 = plus(x, &z);
    if cfg.ca_placement == CaPlacement::Layer {
        x1 = plus(&x1, &naive_channel_attention(x, store, &format!("{}.ca", prefix))?);
    }
    let z = naive_layer_norm(&x1, store, &format!("{}.ln2", prefix))?;
    let f = naive_cfn(&z, store, &format!("{}.cfn", prefix))?;
    Ok(plus(&x1, &f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn new(parameter: String, analytic: f64, numeric: f64, tolerance: f64) -> Self {
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        GradCheckReport {
            parameter,
            analytic,
            numeric,
            rel_error,
            tolerance,
            pass: rel_error < tolerance,
        }
    }
}

/// Central-difference check of the gradients stored in `store` at the `probes`
/// `(name, flat index)`. The step for entry `θ` is `step * max(1, |θ|)`.
pub fn finite_diff_grad<F>(
    mut f: F,
    store: &ParamStore,
    probes: &[(String, usize)],
    step: f64,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(probes.len());
    for (name, idx) in probes {
        let p = store
            .get(name)
            .ok_or_else(|| CstError::Config(format!("missing parameter '{}'", name)))?;
        let theta = p.value[*idx];
        let hstep = step * theta.abs().max(1.0);
        work.value_mut(name)[*idx] = theta + hstep;
        let up = f(&work)?;
        work.value_mut(name)[*idx] = theta - hstep;
        let down = f(&work)?;
        work.value_mut(name)[*idx] = theta;
        if !up.is_finite() || !down.is_finite() {
            return Err(CstError::Numeric(format!(
                "non-finite objective probing {}[{}]",
                name, idx
            )));
        }
        let numeric = (up - down) / (2.0 * hstep);
        out.push(GradCheckReport::new(
            format!("{}[{}]", name, idx),
            p.grad[*idx],
            numeric,
            tolerance,
        ));
    }
    Ok(out)
}

/// Runs `f` on a fresh tape and returns its per-tag MAC tally.
pub fn count_macs<F: FnOnce(&mut Graph)>(f: F) -> BTreeMap<String, u64> {
    let mut g = Graph::new();
    f(&mut g);
    g.mac_tally().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSpec};

    #[test]
    fn cells_match_adaptive_rule() {
        assert_eq!(cell(0, 5, 2), (0, 3));
        assert_eq!(cell(1, 5, 2), (2, 5));
        assert_eq!(cell(3, 8, 4), (6, 8));
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::from_specs(&[ParamSpec::new("t", &[1], Init::Zeros)], 0).unwrap();
        store.value_mut("t")[0] = 3.0;
        store.get_mut("t").unwrap().grad[0] = 6.0;
        let f = |s: &ParamStore| Ok(s.value("t")[0].powi(2));
        let r = finite_diff_grad(f, &store, &[("t".into(), 0)], 1e-5, 1e-6).unwrap();
        assert!((r[0].numeric - 6.0).abs() < 1e-6);
        assert!(r[0].pass);
        store.get_mut("t").unwrap().grad[0] = 12.0;
        let r = finite_diff_grad(f, &store, &[("t".into(), 0)], 1e-5, 1e-3).unwrap();
        assert!(!r[0].pass);
    }

    #[test]
    fn attention_core_macs_by_hand() {
        use crate::attention::attention_core;
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.5, 2.0]);
        attention_core(&t, &t, &t, None).unwrap();
        let tally = count_macs(|g| {
            let q = g.leaf(t.clone());
            g.set_tag("score");
            let s = g.bmm(q, q, false, true);
            let a = g.softmax(s);
            g.set_tag("apply");
            g.bmm(a, q, false, false);
        });
        assert_eq!(tally["score"], 8);
        assert_eq!(tally["apply"], 8);
    }
}
