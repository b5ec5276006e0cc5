use super::config::{AttnKind, CaPlacement, CstConfig, LN_EPS};
use crate::attention::{csa_forward, csa_param_specs, cse_forward, cse_param_specs};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamSpec};

pub(crate) fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, groups: usize) -> Var {
    let w = p.get(&format!("{}.w", name));
    let b = p.get(&format!("{}.b", name));
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), 1, k / 2, groups)
}

pub fn layer_norm_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{}.g", prefix), &[channels], Init::Ones),
        ParamSpec::new(format!("{}.b", prefix), &[channels], Init::Zeros),
    ]
}

/// Per-pixel normalization over channels followed by the affine map.
pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let gamma = p.get(&format!("{}.g", prefix));
    let beta = p.get(&format!("{}.b", prefix));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn cfn_specs(prefix: &str, channels: usize, expansion: usize) -> Vec<ParamSpec> {
    let (c, e) = (channels, channels * expansion);
    let mut s = Vec::new();
    for i in 1..=2 {
        s.extend(ParamSpec::conv(&format!("{}.dw{}", prefix, i), c, c, 3, c));
        s.extend(ParamSpec::conv(&format!("{}.pw{}", prefix, i), c, e, 1, 1));
    }
    s.extend(ParamSpec::conv(&format!("{}.out", prefix), e, c, 1, 1));
    s
}

/// Gated feed-forward: `out(GELU(pw1(dw1(x))) * pw2(dw2(x)))`.
pub fn cfn(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let c = g.shape(x)[2];
    let prev = g.set_tag("cfn");
    let a = conv(g, p, &format!("{}.dw1", prefix), x, c);
    let a = conv(g, p, &format!("{}.pw1", prefix), a, 1);
    let a = g.gelu(a);
    let b = conv(g, p, &format!("{}.dw2", prefix), x, c);
    let b = conv(g, p, &format!("{}.pw2", prefix), b, 1);
    let gated = g.mul(a, b);
    let y = conv(g, p, &format!("{}.out", prefix), gated, 1);
    g.set_tag(prev);
    y
}

pub fn channel_attention_specs(prefix: &str, channels: usize, width: usize) -> Vec<ParamSpec> {
    let mut s = ParamSpec::conv(&format!("{}.down", prefix), channels, width, 1, 1).to_vec();
    s.extend(ParamSpec::conv(&format!("{}.up", prefix), width, channels, 1, 1));
    s
}

/// Squeeze-and-excitation rescaling of each channel by a gate in `(0, 1)`.
pub fn channel_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Var {
    let prev = g.set_tag("ca");
    let z = g.adaptive_avg_pool(x, 1, 1);
    let z = conv(g, p, &format!("{}.down", prefix), z, 1);
    let z = g.relu(z);
    let z = conv(g, p, &format!("{}.up", prefix), z, 1);
    let gate = g.sigmoid(z);
    g.set_tag(prev);
    g.mul(x, gate)
}

pub fn layer_specs(prefix: &str, cfg: &CstConfig, shifted: bool) -> Vec<ParamSpec> {
    let mut s = layer_norm_specs(&format!("{}.ln1", prefix), cfg.channels);
    for (i, kind) in cfg.variant.kernels().iter().enumerate() {
        let name = format!("{}.att{}", prefix, i);
        match kind {
            AttnKind::Csa => s.extend(csa_param_specs(&name, &cfg.csa(shifted))),
            AttnKind::Cse => s.extend(cse_param_specs(&name, &cfg.cse())),
        }
    }
    if cfg.ca_placement == CaPlacement::Layer {
        s.extend(channel_attention_specs(
            &format!("{}.ca", prefix),
            cfg.channels,
            cfg.ca_width(),
        ));
    }
    s.extend(layer_norm_specs(&format!("{}.ln2", prefix), cfg.channels));
    s.extend(cfn_specs(&format!("{}.cfn", prefix), cfg.channels, cfg.ffn_expansion));
    s
}

/// The attention slot alone: the variant's kernels applied in sequence.
pub fn cmsa(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CstConfig, shifted: bool, x: Var) -> Var {
    let mut z = x;
    for (i, kind) in cfg.variant.kernels().iter().enumerate() {
        let name = format!("{}.att{}", prefix, i);
        z = match kind {
            AttnKind::Csa => csa_forward(g, p, &name, &cfg.csa(shifted), z),
            AttnKind::Cse => cse_forward(g, p, &name, &cfg.cse(), z),
        };
    }
    z
}

/// `x + CMSA(LN(x))` followed by `x + CFN(LN(x))`.
pub fn transformer_layer(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CstConfig, shifted: bool, x: Var) -> Var {
    let z = layer_norm(g, p, &format!("{}.ln1", prefix), x);
    let a = cmsa(g, p, prefix, cfg, shifted, z);
    let mut x1 = g.add(x, a);
    if cfg.ca_placement == CaPlacement::Layer {
        let c = channel_attention(g, p, &format!("{}.ca", prefix), x);
        x1 = g.add(x1, c);
    }
    let z = layer_norm(g, p, &format!("{}.ln2", prefix), x1);
    let f = cfn(g, p, &format!("{}.cfn", prefix), z);
    g.add(x1, f)
}

/// Layer `j` of a stage uses shifted windows when `j` is odd.
pub fn layer_shifted(j: usize) -> bool {
    j % 2 == 1
}

pub fn stage_specs(prefix: &str, cfg: &CstConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for j in 0..cfg.layers_per_stage {
        s.extend(layer_specs(&format!("{}.l{}", prefix, j), cfg, layer_shifted(j)));
    }
    if cfg.ca_placement == CaPlacement::Stage {
        s.extend(channel_attention_specs(
            &format!("{}.ca", prefix),
            cfg.channels,
            cfg.ca_width(),
        ));
    }
    s.extend(ParamSpec::conv(
        &format!("{}.conv", prefix),
        cfg.channels,
        cfg.channels,
        3,
        1,
    ));
    s
}

/// `conv3x3(layers(x) + CA(x)) + x`.
pub fn stage_forward(g: &mut Graph, p: &Bound, prefix: &str, cfg: &CstConfig, x: Var) -> Var {
    let mut t = x;
    for j in 0..cfg.layers_per_stage {
        t = transformer_layer(g, p, &format!("{}.l{}", prefix, j), cfg, layer_shifted(j), t);
    }
    if cfg.ca_placement == CaPlacement::Stage {
        let c = channel_attention(g, p, &format!("{}.ca", prefix), x);
        t = g.add(t, c);
    }
    let prev = g.set_tag("stage_conv");
    let y = conv(g, p, &format!("{}.conv", prefix), t, 1);
    g.set_tag(prev);
    g.add(y, x)
}
