//! The reference suite behind `cst selfcheck`: fast kernels against the
//! scalar-loop references, an end-to-end gradient check, and MAC tallies
//! against the closed-form counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    csa_forward, csa_forward_eval, csa_param_specs, cse_forward, cse_forward_eval, cse_param_specs, flops_csa,
    flops_cse, CsaConfig, CseConfig, KeyScope,
};
use crate::blocks::{cst_forward, init_params, layer_specs, transformer_layer, CaPlacement, CstConfig, Variant};
use crate::error::Result;
use crate::graph::Graph;
use crate::losses::{loss_on_tape, LossWeights};
use crate::oracle::{count_macs, finite_diff_grad, naive_csa, naive_cse, naive_layer, GradCheckReport};
use crate::params::{ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// Largest max-abs difference tolerated between a kernel and its reference.
pub const ORACLE_TOL: f64 = 1e-5;
/// Relative error bound of the finite-difference check.
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
}

/// Parameters redrawn on `[-0.6, 0.6]` so softmaxes and gates are far from flat.
pub fn loud_store(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::from_specs(specs, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in store.iter_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
    Ok(store)
}

pub const ORACLE_DIMS: [(usize, usize); 4] = [(4, 4), (8, 8), (16, 16), (5, 7)];

/// Worst CSA kernel/reference gap over seeds, `ORACLE_DIMS`, shift states and key scopes.
pub fn csa_oracle_gap(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        for &(h, w) in &ORACLE_DIMS {
            for shifted in [false, true] {
                for key_scope in [KeyScope::Global, KeyScope::PerWindow] {
                    let cfg = CsaConfig {
                        channels: 8,
                        win_h: 2,
                        win_w: 4,
                        heads: 2,
                        shifted,
                        key_scope,
                    };
                    let store = loud_store(&csa_param_specs("a", &cfg), seed)?;
                    let x = random_map(h, w, 8, seed + 100);
                    let fast = csa_forward_eval(&x, &store, "a", &cfg)?;
                    let (slow, _) = naive_csa(&x, &store, "a", &cfg, None)?;
                    worst = worst.max(fast.max_abs_diff(&slow));
                }
            }
        }
    }
    Ok(worst)
}

/// Worst CSE kernel/reference gap, and the worst deviation of an attention row sum from 1.
pub fn cse_oracle_gap(seeds: u64) -> Result<(f64, f64)> {
    let (mut worst, mut rows) = (0.0f64, 0.0f64);
    for seed in 0..seeds {
        for &(h, w) in &ORACLE_DIMS {
            for heads in [1, 2] {
                let cfg = CseConfig::new(8, heads);
                let store = loud_store(&cse_param_specs("e", &cfg), seed)?;
                let x = random_map(h, w, 8, seed + 7);
                let fast = cse_forward_eval(&x, &store, "e", &cfg)?;
                let (slow, _, maps) = naive_cse(&x, &store, "e", &cfg)?;
                for m in &maps {
                    for row in m.chunks(cfg.head_dim()) {
                        rows = rows.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                worst = worst.max(fast.max_abs_diff(&slow));
            }
        }
    }
    Ok((worst, rows))
}

/// Worst gap between the taped transformer layer and the reference layer over
/// every variant, both shift states and per-layer / no channel attention.
pub fn layer_oracle_gap(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        for variant in Variant::ALL {
            for shifted in [false, true] {
                for placement in [CaPlacement::Layer, CaPlacement::Off] {
                    let mut cfg = CstConfig::tiny(4, 8, 2);
                    cfg.variant = variant;
                    cfg.ca_placement = placement;
                    let store = loud_store(&layer_specs("l", &cfg, shifted), seed)?;
                    for &(h, w) in &ORACLE_DIMS {
                        let x = random_map(h, w, 8, seed + 11);
                        let mut g = Graph::new();
                        let p = store.bind(&mut g);
                        let xv = g.leaf(x.clone());
                        let y = transformer_layer(&mut g, &p, "l", &cfg, shifted, xv);
                        let slow = naive_layer(&x, &store, "l", &cfg, shifted)?;
                        worst = worst.max(g.value(y).max_abs_diff(&slow));
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// The network used for the end-to-end gradient check: 8×8×4 input, C=8, one
/// stage of one layer, ×2.
pub fn grad_check_config() -> CstConfig {
    let mut cfg = CstConfig::tiny(4, 8, 2);
    cfg.stages = 1;
    cfg.layers_per_stage = 1;
    cfg
}

fn model_loss(
    store: &ParamStore,
    cfg: &CstConfig,
    lr: &Tensor,
    hr: &Tensor,
    backward: bool,
) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let y = cst_forward(&mut g, &p, cfg, lr)?;
    let (total, b) = loss_on_tape(&mut g, y, hr, &LossWeights::default())?;
    let mut out = store.clone();
    if backward {
        let grads = g.backward(total);
        out.store_grads(&grads, &p);
    }
    Ok((b.total, out))
}

/// Central-difference check of `probes` parameters of the tiny network on the
/// full training loss. `scale_grad` multiplies the analytic gradients first,
/// which lets callers confirm that a wrong gradient is caught.
pub fn grad_check_cst(probes: usize, seed: u64, scale_grad: f64) -> Result<Vec<GradCheckReport>> {
    let cfg = grad_check_config();
    let mut params = init_params(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random weights everywhere so no parameter sits on a flat spot of the loss
    for (_, p) in params.iter_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let lr = Tensor::from_fn(&[8, 8, 4], |_| rng.random_range(0.1..0.9));
    // Target = output minus a residual pattern that keeps every residual and every
    // neighbour difference of residuals at least 0.015 from the L1 kinks.
    let sr0 = {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let y = cst_forward(&mut g, &p, &cfg, &lr)?;
        g.value(y).clone()
    };
    let hr = Tensor::from_fn(sr0.shape(), |i| {
        let (c, x, y) = (i % 4, i / 4 % 16, i / 64);
        let k = (y + 2 * x + 4 * c) % 7;
        sr0.data()[i] - (-0.105 + 0.03 * k as f64)
    });
    let (_, mut graded) = model_loss(&params, &cfg, &lr, &hr, true)?;
    for (_, p) in graded.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= scale_grad);
    }
    let names: Vec<(String, usize)> = graded.iter().map(|(n, p)| (n.to_string(), p.value.len())).collect();
    let mut picks = Vec::with_capacity(probes);
    // every tensor first, then uniformly over all entries
    for (n, len) in &names {
        if picks.len() < probes {
            picks.push((n.clone(), rng.random_range(0..*len)));
        }
    }
    while picks.len() < probes {
        let (n, len) = &names[rng.random_range(0..names.len())];
        picks.push((n.clone(), rng.random_range(0..*len)));
    }
    finite_diff_grad(
        |s| model_loss(s, &cfg, &lr, &hr, false).map(|r| r.0),
        &graded,
        &picks,
        GRAD_STEP,
        GRAD_TOL,
    )
}

/// Mismatches between traced MAC tallies and the closed-form counts, as messages.
pub fn tally_mismatches() -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for &(h, w, c, wh, ww) in &[
        (12usize, 20usize, 8usize, 2usize, 4usize),
        (7, 9, 12, 4, 2),
        (16, 16, 16, 2, 8),
    ] {
        let cfg = CsaConfig {
            channels: c,
            win_h: wh,
            win_w: ww,
            heads: 2,
            shifted: true,
            key_scope: KeyScope::Global,
        };
        let store = ParamStore::from_specs(&csa_param_specs("a", &cfg), 1)?;
        let x = random_map(h, w, c, 3);
        let tally = count_macs(|g| {
            let p = store.bind(g);
            let xv = g.leaf(x.clone());
            csa_forward(g, &p, "a", &cfg, xv);
        });
        let f = flops_csa(h, w, c, wh, ww);
        let got = (tally["csa.proj_qv"], tally["csa.attention"], tally["csa.proj_out"]);
        if got != (f.proj_qv, f.attention(), f.proj_out) {
            bad.push(format!("csa {}x{}x{}: tape {:?} vs formula {:?}", h, w, c, got, f));
        }
    }
    for &(h, w, c, heads) in &[(8usize, 8usize, 16usize, 1usize), (6, 10, 8, 2), (5, 7, 12, 3)] {
        let cfg = CseConfig::new(c, heads);
        let store = ParamStore::from_specs(&cse_param_specs("e", &cfg), 1)?;
        let x = random_map(h, w, c, 4);
        let tally = count_macs(|g| {
            let p = store.bind(g);
            let xv = g.leaf(x.clone());
            cse_forward(g, &p, "e", &cfg, xv);
        });
        let f = flops_cse(h, w, &cfg);
        let got = (
            tally["cse.qk_reduce"],
            tally["cse.value"],
            tally["cse.attention_map"],
            tally["cse.apply"],
            tally["cse.proj"],
        );
        if got != (f.qk_reduce, f.value, f.attention_map, f.apply, f.proj) {
            bad.push(format!("cse {}x{}x{}: tape {:?} vs formula {:?}", h, w, c, got, f));
        }
    }
    Ok(bad)
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check {
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// Runs the whole suite. Takes a few seconds in an optimized build.
pub fn selfcheck() -> Vec<Check> {
    vec![
        run("csa_vs_reference", || {
            let gap = csa_oracle_gap(5)?;
            Ok((gap < ORACLE_TOL, format!("max |diff| {:.2e}", gap)))
        }),
        run("cse_vs_reference", || {
            let (gap, rows) = cse_oracle_gap(5)?;
            Ok((
                gap < ORACLE_TOL && rows < 1e-12,
                format!("max |diff| {:.2e}, row-sum err {:.1e}", gap, rows),
            ))
        }),
        run("layer_variants_vs_reference", || {
            let gap = layer_oracle_gap(1)?;
            Ok((
                gap < ORACLE_TOL,
                format!("max |diff| {:.2e} over {} variants", gap, Variant::ALL.len()),
            ))
        }),
        run("gradient_check", || {
            let r = grad_check_cst(40, 1, 1.0)?;
            let worst = r.iter().map(|c| c.rel_error).fold(0.0, f64::max);
            let fails = r.iter().filter(|c| !c.pass).count();
            Ok((fails == 0, format!("{} probes, worst rel err {:.2e}", r.len(), worst)))
        }),
        run("gradient_check_detects_error", || {
            let r = grad_check_cst(10, 1, 2.0)?;
            let caught = r.iter().filter(|c| !c.pass).count();
            Ok((
                caught == r.len(),
                format!("{}/{} doubled gradients flagged", caught, r.len()),
            ))
        }),
        run("mac_tallies", || {
            let bad = tally_mismatches()?;
            Ok((
                bad.is_empty(),
                if bad.is_empty() {
                    "6 configs exact".into()
                } else {
                    bad.join("; ")
                },
            ))
        }),
    ]
}

/// Fixed-width pass/fail table.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| {
            format!(
                "{:<w$}  {}  {}\n",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.detail,
                w = width
            )
        })
        .collect()
}
