//! Separable Catmull-Rom resampling with an antialias prefilter on downscale.

use super::cube::HsiCube;
use crate::error::{CstError, Result};
use crate::tensor::Tensor;

/// Written into metric reports so comparisons state which resampler produced the LR inputs.
pub const RESAMPLER_TAG: &str = "bicubic-catmull-rom(a=-0.5),antialias,edge-replicate";

const A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized tap lists `(source index, weight)` for each output sample along one axis.
fn axis_taps(n_in: usize, n_out: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support_scale = if antialias && scale > 1.0 { scale } else { 1.0 };
    let radius = 2.0 * support_scale;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - radius - 0.5).floor() as isize;
            let hi = (center + radius + 0.5).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = cubic_weight((j as f64 + 0.5 - center) / support_scale);
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, n_in as isize - 1) as usize;
                total += w;
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resamples one `h x w` plane stored row-major with element stride `stride`.
fn resample_strided(
    src: &[f64],
    h: usize,
    w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Vec<f64> {
    let tx = axis_taps(w, out_w, antialias);
    let ty = axis_taps(h, out_h, antialias);
    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        for (ox, taps) in tx.iter().enumerate() {
            rows[y * out_w + ox] = taps.iter().map(|&(s, wt)| wt * src[(y * w + s) * stride]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (oy, taps) in ty.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(s, wt)| wt * rows[s * out_w + ox]).sum();
        }
    }
    out
}

/// Resamples a single row-major plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, antialias: bool) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    resample_strided(src, h, w, 1, out_h, out_w, antialias)
}

fn check_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(CstError::Geometry(format!(
            "resize target {}x{} must be positive",
            out_h, out_w
        )));
    }
    Ok(())
}

pub fn resize_with(cube: &HsiCube, out_h: usize, out_w: usize, antialias: bool) -> Result<HsiCube> {
    check_dims(out_h, out_w)?;
    let (h, w, b) = cube.dims();
    let mut data = Vec::with_capacity(out_h * out_w * b);
    for band in 0..b {
        let plane: Vec<f64> = cube.band(band).iter().map(|&v| v as f64).collect();
        data.extend(
            resize_plane(&plane, h, w, out_h, out_w, antialias)
                .into_iter()
                .map(|v| v as f32),
        );
    }
    HsiCube::new(out_h, out_w, b, data)
}

/// Per-band bicubic resize; antialiased when shrinking.
pub fn bicubic_resize(cube: &HsiCube, out_h: usize, out_w: usize) -> Result<HsiCube> {
    resize_with(cube, out_h, out_w, true)
}

/// Resize of a channel-last `[H, W, C]` tensor, band by band.
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    check_dims(out_h, out_w)?;
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; out_h * out_w * c];
    for ch in 0..c {
        let plane = resample_strided(&t.data()[ch..], h, w, c, out_h, out_w, true);
        for (p, v) in plane.into_iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    Ok(Tensor::new(vec![out_h, out_w, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
        let mut s = seed;
        HsiCube::from_fn(h, w, b, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
    }

    /// Direct 2-D evaluation of the antialiased Catmull-Rom filter, no tap tables.
    fn reference_resize(c: &HsiCube, oh: usize, ow: usize) -> Vec<f64> {
        let (h, w, b) = c.dims();
        let kern = |t: f64| {
            let t = t.abs();
            if t < 1.0 {
                1.5 * t * t * t - 2.5 * t * t + 1.0
            } else if t < 2.0 {
                -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
            } else {
                0.0
            }
        };
        let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
        let (fy, fx) = (sy.max(1.0), sx.max(1.0));
        let mut out = Vec::new();
        for band in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cy = (oy as f64 + 0.5) * sy;
                    let cx = (ox as f64 + 0.5) * sx;
                    let (mut num, mut wy_sum, mut wx_sum) = (0.0, 0.0, 0.0);
                    for j in -40i64..(h as i64 + 40) {
                        let wy = kern((j as f64 + 0.5 - cy) / fy);
                        wy_sum += wy;
                        for i in -40i64..(w as i64 + 40) {
                            let wx = kern((i as f64 + 0.5 - cx) / fx);
                            if j == -40 {
                                wx_sum += wx;
                            }
                            let yy = j.clamp(0, h as i64 - 1) as usize;
                            let xx = i.clamp(0, w as i64 - 1) as usize;
                            num += wy * wx * c.get(band, yy, xx) as f64;
                        }
                    }
                    out.push(num / (wy_sum * wx_sum));
                }
            }
        }
        out
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn identity_resize() {
        let c = noise_cube(7, 5, 2, 3);
        let r = bicubic_resize(&c, 7, 5).unwrap();
        for (a, b) in c.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constants_preserved() {
        let c = HsiCube::from_fn(9, 6, 2, |_, _, _| 0.7);
        for (oh, ow) in [(3, 2), (18, 12), (5, 13), (1, 1)] {
            let r = bicubic_resize(&c, oh, ow).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.7).abs() < 1e-6), "{}x{}", oh, ow);
        }
    }

    #[test]
    fn downscale_matches_reference() {
        let c = noise_cube(16, 16, 2, 11);
        let r = bicubic_resize(&c, 8, 8).unwrap();
        let reference = reference_resize(&c, 8, 8);
        let max = r
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-5, "max diff {}", max);
    }

    #[test]
    fn upscale_matches_reference() {
        let c = noise_cube(6, 5, 1, 5);
        let r = bicubic_resize(&c, 12, 10).unwrap();
        let reference = reference_resize(&c, 12, 10);
        for (a, b) in r.data().iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_and_cube_paths_agree() {
        let c = noise_cube(8, 6, 3, 2);
        let t = resize_tensor(&c.to_tensor(), 16, 12).unwrap();
        let r = bicubic_resize(&c, 16, 12).unwrap();
        for (a, b) in HsiCube::from_tensor(&t).unwrap().data().iter().zip(r.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(bicubic_resize(&HsiCube::zeros(2, 2, 1), 0, 2).is_err());
    }
}
