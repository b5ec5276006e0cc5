//! Training objective: L1 + weighted spectral-angle + weighted gradient loss.
//!
//! Each loss returns its value together with the gradient wrt `sr`, so the
//! total can be attached to the tape as a single external node.

use log::warn;

use crate::error::{CstError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.3,
            lambda_g: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0 && self.lambda_g >= 0.0) {
            return Err(CstError::Config(format!(
                "loss weights must be non-negative: {:?}",
                self
            )));
        }
        Ok(())
    }

    pub fn combine(&self, l1: f64, sam: f64, grad: f64) -> f64 {
        l1 + self.lambda_s * sam + self.lambda_g * grad
    }
}

/// Individual terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub sam: f64,
    pub grad: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l1 += b.l1 / n;
            m.sam += b.sam / n;
            m.grad += b.grad / n;
            m.total += b.total / n;
        }
        m
    }
}

fn dims(sr: &Tensor, hr: &Tensor) -> Result<(usize, usize, usize)> {
    if sr.shape() != hr.shape() || sr.shape().len() != 3 {
        return Err(CstError::DimMismatch(format!(
            "loss operands {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    let s = sr.shape();
    Ok((s[0], s[1], s[2]))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference and its gradient.
pub fn l1_loss_grad(sr: &Tensor, hr: &Tensor) -> Result<(f64, Vec<f64>)> {
    dims(sr, hr)?;
    let n = sr.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(sr.len());
    for (a, b) in sr.data().iter().zip(hr.data()) {
        loss += (a - b).abs();
        grad.push(sign(a - b) / n);
    }
    Ok((loss / n, grad))
}

pub fn l1_loss(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    Ok(l1_loss_grad(sr, hr)?.0)
}

/// Mean per-pixel spectral angle divided by pi, in `[0, 1]`, and its gradient.
/// Pixels where either spectrum is zero contribute 0.
pub fn sam_loss_grad(sr: &Tensor, hr: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (h, w, b) = dims(sr, hr)?;
    let pixels = h * w;
    let mut grad = vec![0.0; sr.len()];
    let mut loss = 0.0;
    let mut zeros = 0usize;
    for p in 0..pixels {
        let s = &sr.data()[p * b..(p + 1) * b];
        let t = &hr.data()[p * b..(p + 1) * b];
        let (mut st, mut ss, mut tt) = (0.0, 0.0, 0.0);
        for k in 0..b {
            st += s[k] * t[k];
            ss += s[k] * s[k];
            tt += t[k] * t[k];
        }
        if ss == 0.0 || tt == 0.0 {
            zeros += 1;
            continue;
        }
        let (ns, nt) = (ss.sqrt(), tt.sqrt());
        let cos = (st / (ns * nt)).clamp(-1.0, 1.0);
        loss += cos.acos() / std::f64::consts::PI;
        let sin2 = 1.0 - cos * cos;
        if sin2 > 1e-12 {
            let f = -1.0 / (std::f64::consts::PI * sin2.sqrt() * pixels as f64);
            for k in 0..b {
                let dcos = t[k] / (ns * nt) - cos * s[k] / ss;
                grad[p * b + k] = f * dcos;
            }
        }
    }
    if zeros > 0 {
        warn!("spectral angle loss: {} zero spectra counted as 0", zeros);
    }
    Ok((loss / pixels as f64, grad))
}

pub fn sam_loss(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    Ok(sam_loss_grad(sr, hr)?.0)
}

/// Mean L1 distance between forward differences along width, height and band,
/// averaged over the three directions.
pub fn gradient_loss_grad(sr: &Tensor, hr: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (h, w, b) = dims(sr, hr)?;
    if h < 2 || w < 2 || b < 2 {
        return Err(CstError::DimMismatch(format!(
            "gradient loss needs at least 2 samples per axis, got {}x{}x{}",
            h, w, b
        )));
    }
    let (s, t) = (sr.data(), hr.data());
    let idx = |y: usize, x: usize, c: usize| (y * w + x) * b + c;
    let mut grad = vec![0.0; sr.len()];
    let mut total = 0.0;
    // (dy, dx, dc) steps and the number of valid differences along each
    let dirs = [
        (0, 1, 0, h * (w - 1) * b),
        (1, 0, 0, (h - 1) * w * b),
        (0, 0, 1, h * w * (b - 1)),
    ];
    for (dy, dx, dc, count) in dirs {
        let n = count as f64;
        let mut acc = 0.0;
        for y in 0..h - dy {
            for x in 0..w - dx {
                for c in 0..b - dc {
                    let (i0, i1) = (idx(y, x, c), idx(y + dy, x + dx, c + dc));
                    let diff = (s[i1] - s[i0]) - (t[i1] - t[i0]);
                    acc += diff.abs();
                    let g = sign(diff) / (3.0 * n);
                    grad[i1] += g;
                    grad[i0] -= g;
                }
            }
        }
        total += acc / n;
    }
    Ok((total / 3.0, grad))
}

pub fn gradient_loss(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    Ok(gradient_loss_grad(sr, hr)?.0)
}

/// Weighted total with its gradient wrt `sr`. Terms with zero weight are still
/// evaluated and reported but do not enter the total or the gradient.
pub fn total_loss_grad(sr: &Tensor, hr: &Tensor, w: &LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    w.validate()?;
    let (l1, mut grad) = l1_loss_grad(sr, hr)?;
    let (sam, gs) = sam_loss_grad(sr, hr)?;
    let (gr, gg) = gradient_loss_grad(sr, hr)?;
    for i in 0..grad.len() {
        grad[i] += w.lambda_s * gs[i] + w.lambda_g * gg[i];
    }
    let b = LossBreakdown {
        l1,
        sam,
        grad: gr,
        total: w.combine(l1, sam, gr),
    };
    Ok((b, grad))
}

pub fn total_loss(sr: &Tensor, hr: &Tensor, w: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_grad(sr, hr, w)?.0)
}

/// Attaches the total loss of `sr` against `hr` to the tape.
pub fn loss_on_tape(g: &mut Graph, sr: Var, hr: &Tensor, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let (b, grad) = total_loss_grad(g.value(sr), hr, w)?;
    if !b.total.is_finite() {
        return Err(CstError::Numeric(format!("non-finite loss {:?}", b)));
    }
    Ok((g.external_scalar(sr, b.total, grad), b))
}
