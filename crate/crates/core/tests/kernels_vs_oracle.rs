use cst_core::attention::{
    csa_forward_eval, csa_param_specs, cse_forward_eval, cse_param_specs, CsaConfig, CseConfig, KeyScope,
};
use cst_core::oracle::{naive_csa, naive_cse};
use cst_core::params::ParamStore;
use cst_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0))
}

/// Parameters with attention-scale weights so the softmax is far from uniform.
fn loud_store(specs: &[cst_core::params::ParamSpec], seed: u64) -> ParamStore {
    let mut store = ParamStore::from_specs(specs, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in store.iter_mut() {
        p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
    store
}

#[test]
fn csa_matches_reference_over_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for &(h, w) in &[(4, 4), (8, 8), (16, 16), (5, 7)] {
            for shifted in [false, true] {
                for scope in [KeyScope::Global, KeyScope::PerWindow] {
                    let cfg = CsaConfig {
                        channels: 8,
                        win_h: 2,
                        win_w: 4,
                        heads: 2,
                        shifted,
                        key_scope: scope,
                    };
                    let store = loud_store(&csa_param_specs("a", &cfg), seed);
                    let x = random_map(h, w, 8, seed + 100);
                    let fast = csa_forward_eval(&x, &store, "a", &cfg).unwrap();
                    let (slow, _) = naive_csa(&x, &store, "a", &cfg, None).unwrap();
                    worst = worst.max(fast.max_abs_diff(&slow));
                }
            }
        }
    }
    assert!(worst < 1e-10, "max abs diff {}", worst);
}

#[test]
fn cse_matches_reference_over_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for &(h, w) in &[(4, 4), (8, 8), (16, 16), (5, 7)] {
            for heads in [1, 2] {
                let cfg = CseConfig::new(8, heads);
                let store = loud_store(&cse_param_specs("e", &cfg), seed);
                let x = random_map(h, w, 8, seed + 7);
                let fast = cse_forward_eval(&x, &store, "e", &cfg).unwrap();
                let (slow, _, maps) = naive_cse(&x, &store, "e", &cfg).unwrap();
                for m in &maps {
                    for row in m.chunks(cfg.head_dim()) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
                worst = worst.max(fast.max_abs_diff(&slow));
            }
        }
    }
    assert!(worst < 1e-10, "max abs diff {}", worst);
}

#[test]
fn tape_and_reference_tallies_match_closed_forms() {
    use cst_core::attention::{csa_forward, cse_forward, flops_csa, flops_cse};
    use cst_core::oracle::count_macs;
    for &(h, w, c, wh, ww) in &[
        (32usize, 32usize, 64usize, 2usize, 16usize),
        (12, 20, 8, 2, 4),
        (7, 9, 12, 4, 2),
    ] {
        let cfg = CsaConfig {
            channels: c,
            win_h: wh,
            win_w: ww,
            heads: 2,
            shifted: true,
            key_scope: KeyScope::Global,
        };
        let store = ParamStore::from_specs(&csa_param_specs("a", &cfg), 1).unwrap();
        let x = random_map(h, w, c, 3);
        let tally = count_macs(|g| {
            let p = store.bind(g);
            let xv = g.leaf(x.clone());
            csa_forward(g, &p, "a", &cfg, xv);
        });
        let f = flops_csa(h, w, c, wh, ww);
        assert_eq!(tally["csa.attention"], f.attention());
        assert_eq!(tally["csa.proj_qv"], f.proj_qv);
        assert_eq!(tally["csa.proj_out"], f.proj_out);
        let (_, naive) = naive_csa(&x, &store, "a", &cfg, None).unwrap();
        assert_eq!(naive, f);
    }
    for &(h, w, c, heads) in &[(8usize, 8usize, 16usize, 1usize), (6, 10, 8, 2), (5, 7, 12, 3)] {
        let cfg = CseConfig::new(c, heads);
        let store = ParamStore::from_specs(&cse_param_specs("e", &cfg), 1).unwrap();
        let x = random_map(h, w, c, 4);
        let tally = count_macs(|g| {
            let p = store.bind(g);
            let xv = g.leaf(x.clone());
            cse_forward(g, &p, "e", &cfg, xv);
        });
        let f = flops_cse(h, w, &cfg);
        assert_eq!(tally["cse.attention_map"], f.attention_map);
        assert_eq!(tally["cse.apply"], f.apply);
        assert_eq!(tally["cse.qk_reduce"], f.qk_reduce);
        assert_eq!(tally["cse.value"], f.value);
        assert_eq!(tally["cse.proj"], f.proj);
        let (_, naive, _) = naive_cse(&x, &store, "e", &cfg).unwrap();
        assert_eq!(naive, f);
    }
}
