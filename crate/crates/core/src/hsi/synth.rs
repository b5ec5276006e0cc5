use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cube::HsiCube;

const ENDMEMBERS: usize = 3;
const WAVES_PER_MAP: usize = 4;
const NOISE_STD: f64 = 0.002;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

/// Deterministic smooth synthetic scene.
///
/// A linear mixture of a few smooth endmember spectra, with abundance maps built
/// from low-frequency 2-D sinusoids (periods 5 to 40 px), plus small Gaussian noise,
/// clipped to [0, 1].
pub fn synth_cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube {
    assert!(h >= 1 && w >= 1 && b >= 1, "synth_cube dims must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectra: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|_| {
            let freq = rng.random_range(0.2..0.9);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let base = rng.random_range(0.25..0.45);
            let amp = rng.random_range(0.1..0.3);
            (0..b)
                .map(|band| {
                    let t = band as f64 / b.max(2) as f64;
                    base + amp * (std::f64::consts::TAU * freq * t + phase).sin()
                })
                .collect()
        })
        .collect();
    let maps: Vec<Vec<Wave>> = (0..ENDMEMBERS)
        .map(|_| {
            (0..WAVES_PER_MAP)
                .map(|_| {
                    let period = rng.random_range(5.0..40.0);
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    Wave {
                        fy: angle.sin() / period,
                        fx: angle.cos() / period,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                        amp: rng.random_range(0.2..0.5),
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, NOISE_STD).unwrap();

    let mut abundance = vec![[0.0f64; ENDMEMBERS]; h * w];
    for y in 0..h {
        for x in 0..w {
            let a = &mut abundance[y * w + x];
            let mut total = 0.0;
            for (m, waves) in maps.iter().enumerate() {
                let v: f64 = 1.0
                    + waves
                        .iter()
                        .map(|wv| {
                            wv.amp * (std::f64::consts::TAU * (wv.fy * y as f64 + wv.fx * x as f64) + wv.phase).sin()
                        })
                        .sum::<f64>();
                a[m] = v.max(0.05);
                total += a[m];
            }
            for v in a.iter_mut() {
                *v /= total;
            }
        }
    }
    HsiCube::from_fn(h, w, b, |band, y, x| {
        let a = &abundance[y * w + x];
        let v: f64 = (0..ENDMEMBERS).map(|m| a[m] * spectra[m][band]).sum::<f64>() + noise.sample(&mut rng);
        v.clamp(0.0, 1.0) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{cosine_similarity, similarity_curves};

    #[test]
    fn deterministic_and_clipped() {
        let a = synth_cube(12, 9, 4, 3);
        assert_eq!(a, synth_cube(12, 9, 4, 3));
        assert_ne!(a, synth_cube(12, 9, 4, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adjacent_bands_are_similar() {
        let c = synth_cube(32, 32, 16, 1);
        for band in 1..16 {
            let s = cosine_similarity(c.band(band - 1), c.band(band)).unwrap();
            assert!(s > 0.9, "bands {} / {}: {}", band - 1, band, s);
        }
        let curves = similarity_curves(&c).unwrap();
        assert!(curves.band_curve[1] > 0.9);
    }
}
