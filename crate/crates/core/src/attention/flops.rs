//! Closed-form multiply-accumulate counts for the attention kernels.
//!
//! Counts follow the tape's conventions: a matmul `[m, k] x [k, n]` is `m*k*n`
//! MACs and a convolution counts every tap, padded ones included.

use super::CseConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsaMacs {
    pub proj_qv: u64,
    pub scores: u64,
    pub apply: u64,
    pub proj_out: u64,
}

impl CsaMacs {
    /// Score plus apply matmuls; the quantity that is linear in `H*W`.
    pub fn attention(&self) -> u64 {
        self.scores + self.apply
    }

    pub fn total(&self) -> u64 {
        self.proj_qv + self.scores + self.apply + self.proj_out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CseMacs {
    pub qk_reduce: u64,
    pub value: u64,
    pub attention_map: u64,
    pub apply: u64,
    pub proj: u64,
}

impl CseMacs {
    pub fn total(&self) -> u64 {
        self.qk_reduce + self.value + self.attention_map + self.apply + self.proj
    }
}

/// MACs of one CSA call on an `height x width x channels` map with `win_h x win_w`
/// windows. Windows are counted over the padded grid of each orientation.
pub fn flops_csa(height: usize, width: usize, channels: usize, win_h: usize, win_w: usize) -> CsaMacs {
    let half = (channels / 2) as u64;
    let t = (win_h * win_w) as u64;
    let mut m = CsaMacs::default();
    for (rows, cols) in [(win_w, win_h), (win_h, win_w)] {
        let n = (height.div_ceil(rows) * width.div_ceil(cols)) as u64;
        m.proj_qv += 2 * n * t * half * half;
        m.scores += n * t * t * half;
        m.apply += n * t * t * half;
    }
    let c = channels as u64;
    m.proj_out = (height * width) as u64 * c * c;
    m
}

/// MACs of one CSE call on an `height x width` map.
pub fn flops_cse(height: usize, width: usize, cfg: &CseConfig) -> CseMacs {
    let (hr, wr) = cfg.reduced_dims(height, width);
    let (hrwr, hw) = ((hr * wr) as u64, (height * width) as u64);
    let c = cfg.channels as u64;
    let cr = cfg.reduced_channels() as u64;
    let d = cfg.head_dim() as u64;
    CseMacs {
        qk_reduce: 2 * (hrwr * c * 9 + hrwr * c * cr),
        value: hw * c * cr,
        attention_map: cr * d * hrwr,
        apply: hw * cr * d,
        proj: hw * cr * c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_windows() {
        assert_eq!(flops_csa(6, 10, 8, 1, 1).attention(), 2 * 6 * 10 * 8);
    }

    #[test]
    fn doubling_is_exact() {
        let a = flops_csa(32, 32, 64, 2, 16);
        let b = flops_csa(64, 32, 64, 2, 16);
        assert_eq!(b.attention(), 2 * a.attention());
        assert_eq!(a.attention(), 2 * 2 * 32 * 32 * 64 * 32 / 2);
    }

    #[test]
    fn cse_map_term() {
        let m = flops_cse(8, 8, &CseConfig::new(16, 1));
        assert_eq!(m.attention_map, 8 * 8 * 4 * 4);
        assert!(m.attention_map < 16 * 16 * 8 * 8);
        let half = flops_cse(8, 8, &CseConfig::new(8, 1));
        assert_eq!(4 * half.attention_map, m.attention_map);
    }
}
