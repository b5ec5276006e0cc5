use super::cube::HsiCube;
use crate::error::{CstError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCurves {
    /// Cosine similarity of band 0 against every band.
    pub band_curve: Vec<f64>,
    /// Cosine similarity of pixel (0, 0)'s spectrum against every pixel, row-major.
    pub pixel_curve: Vec<f64>,
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Band-to-band and pixel-to-pixel redundancy curves. Targets with zero norm score 0.
pub fn similarity_curves(cube: &HsiCube) -> Result<SimilarityCurves> {
    let (h, w, b) = cube.dims();
    let first_band = cube.band(0);
    if first_band.iter().all(|&v| v == 0.0) {
        return Err(CstError::UndefinedSimilarity("first band has zero norm".into()));
    }
    let first_pixel: Vec<f32> = (0..b).map(|band| cube.get(band, 0, 0)).collect();
    if first_pixel.iter().all(|&v| v == 0.0) {
        return Err(CstError::UndefinedSimilarity(
            "first pixel spectrum has zero norm".into(),
        ));
    }
    let band_curve = (0..b)
        .map(|band| cosine_similarity(first_band, cube.band(band)).unwrap_or(0.0))
        .collect();
    let mut spectrum = vec![0.0f32; b];
    let mut pixel_curve = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            for (band, s) in spectrum.iter_mut().enumerate() {
                *s = cube.get(band, y, x);
            }
            pixel_curve.push(cosine_similarity(&first_pixel, &spectrum).unwrap_or(0.0));
        }
    }
    Ok(SimilarityCurves {
        band_curve,
        pixel_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let c = HsiCube::from_fn(3, 3, 4, |b, y, x| 1.0 + (b * 7 + y * 3 + x) as f32 % 5.0);
        let s = similarity_curves(&c).unwrap();
        assert!((s.band_curve[0] - 1.0).abs() < 1e-12);
        assert!((s.pixel_curve[0] - 1.0).abs() < 1e-12);
        assert!(s
            .band_curve
            .iter()
            .chain(&s.pixel_curve)
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_bands() {
        let c = HsiCube::from_fn(4, 5, 3, |_, y, x| (y * 5 + x) as f32 + 0.5);
        let s = similarity_curves(&c).unwrap();
        assert!(s.band_curve.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_scalar_loop() {
        let mut seed = 17u64;
        let c = HsiCube::from_fn(4, 4, 3, |_, _, _| {
            seed = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (seed >> 40) as f32 / (1u64 << 24) as f32 - 0.3
        });
        let s = similarity_curves(&c).unwrap();
        for j in 0..3 {
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for y in 0..4 {
                for x in 0..4 {
                    let p = c.get(0, y, x) as f64;
                    let q = c.get(j, y, x) as f64;
                    d += p * q;
                    a += p * p;
                    b += q * q;
                }
            }
            assert!((s.band_curve[j] - d / (a.sqrt() * b.sqrt())).abs() < 1e-6);
        }
        for k in 0..16 {
            let (y, x) = (k / 4, k % 4);
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for band in 0..3 {
                let p = c.get(band, 0, 0) as f64;
                let q = c.get(band, y, x) as f64;
                d += p * q;
                a += p * p;
                b += q * q;
            }
            assert!((s.pixel_curve[k] - d / (a.sqrt() * b.sqrt())).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_reference_is_error() {
        let c = HsiCube::zeros(2, 2, 2);
        assert!(matches!(similarity_curves(&c), Err(CstError::UndefinedSimilarity(_))));
    }
}
