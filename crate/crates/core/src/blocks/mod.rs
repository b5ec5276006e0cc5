//! Transformer layers, stages and the full super-resolution network.

mod checkpoint;
mod config;
mod layers;
mod network;

pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{AttnKind, CaPlacement, CstConfig, Variant, LN_EPS};
pub use layers::{
    cfn, cfn_specs, channel_attention, channel_attention_specs, cmsa, layer_norm, layer_norm_specs, layer_shifted,
    layer_specs, stage_forward, stage_specs, transformer_layer,
};
pub use network::{
    check_params, cst_forward, cst_infer, init_params, model_macs, param_count, param_specs, pixel_shuffle,
    pixel_shuffle_var, pixel_unshuffle, total_macs,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| (i * 37 % 101) as f64 / 101.0)
    }

    #[test]
    fn shuffle_places_channels_row_major() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        let z = ramp(&[3, 2, 8]);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, 2).unwrap(), 2).unwrap(), z);
        assert!(pixel_shuffle(&ramp(&[2, 2, 6]), 2).is_err());
    }

    #[test]
    fn output_dims_for_each_scale() {
        for s in [2, 4, 8] {
            let cfg = CstConfig::tiny(3, 8, s);
            let store = init_params(&cfg).unwrap();
            let y = cst_infer(&store, &cfg, &ramp(&[4, 6, 3])).unwrap();
            assert_eq!(y.shape(), &[4 * s, 6 * s, 3]);
        }
    }

    #[test]
    fn zeroed_trunk_is_bicubic() {
        let cfg = CstConfig::tiny(3, 8, 2);
        let mut store = init_params(&cfg).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| !n.starts_with("final"))
            .map(String::from)
            .collect();
        for n in names {
            store.zero_prefix(&n);
        }
        store.value_mut("final.w").iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            store.value_mut("final.w")[(i * 3 + i) * 9 + 4] = 1.0;
        }
        let lr = ramp(&[5, 4, 3]);
        let y = cst_infer(&store, &cfg, &lr).unwrap();
        let bic = crate::hsi::resize_tensor(&lr, 10, 8).unwrap();
        assert!(y.max_abs_diff(&bic) < 1e-12);
    }

    #[test]
    fn band_mismatch_is_config_error() {
        let cfg = CstConfig::tiny(3, 8, 2);
        let store = init_params(&cfg).unwrap();
        assert!(cst_infer(&store, &cfg, &ramp(&[4, 4, 2])).is_err());
    }

    #[test]
    fn macs_match_tape() {
        for &(variant, placement) in &[
            (Variant::Full, CaPlacement::Stage),
            (Variant::NoCse, CaPlacement::Layer),
            (Variant::CseCse, CaPlacement::Off),
        ] {
            let mut cfg = CstConfig::tiny(3, 8, 4);
            cfg.layers_per_stage = 2;
            cfg.variant = variant;
            cfg.ca_placement = placement;
            let store = init_params(&cfg).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            cst_forward(&mut g, &p, &cfg, &ramp(&[5, 6, 3])).unwrap();
            let model = model_macs(&cfg, 5, 6);
            let tape: std::collections::BTreeMap<String, u64> = g
                .mac_tally()
                .iter()
                .filter(|(_, &v)| v > 0)
                .map(|(k, &v)| (k.clone(), v))
                .collect();
            assert_eq!(tape, model, "{:?}", variant);
        }
    }

    #[test]
    fn params_grow_with_stages_and_drop_without_cse() {
        let mut cfg = CstConfig::tiny(4, 8, 2);
        let one = param_count(&cfg);
        cfg.stages = 2;
        assert!(param_count(&cfg) > one);
        let full = param_count(&cfg);
        cfg.variant = Variant::NoCse;
        assert!(param_count(&cfg) < full);
    }

    #[test]
    fn zero_projections_make_layer_identity() {
        let cfg = CstConfig::tiny(4, 8, 2);
        let mut store = ParamStore::from_specs(&layer_specs("l", &cfg, true), 3).unwrap();
        for n in ["l.att1.proj.w", "l.att1.proj.b", "l.cfn.out.w", "l.cfn.out.b"] {
            store.zero_prefix(n);
        }
        let x = ramp(&[6, 6, 8]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let y = transformer_layer(&mut g, &p, "l", &cfg, true, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = CstConfig::tiny(3, 8, 2);
        let store = init_params(&cfg).unwrap();
        let bytes = encode_checkpoint(&cfg, &store);
        let (c2, s2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, store);
        assert_eq!(encode_checkpoint(&c2, &s2), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn full_config_accounting() {
        let cfg = CstConfig::full(128, 4);
        let n = param_count(&cfg) as f64;
        let f = total_macs(&cfg, 32, 32) as f64;
        assert!((n / 11.119e6 - 1.0).abs() < 0.15, "params {}", n);
        assert!((f / 21.287e9 - 1.0).abs() < 0.15, "macs {}", f);
    }
}
