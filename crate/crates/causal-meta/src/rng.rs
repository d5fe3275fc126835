//! Seed derivation and the handful of sampling primitives the crate needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 finalizer; decorrelates derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a master seed and two stream tags
/// (e.g. epoch and task id). Same inputs, same seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    mix(mix(master ^ mix(a)) ^ mix(b.wrapping_add(0x51ed2701)))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw on the open interval (0, 1).
pub fn open01(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel(0, 1) draw.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    -(-open01(rng).ln()).ln()
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1 = open01(rng);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s = derive_seed(0, 0, 0);
        assert_ne!(s, derive_seed(0, 0, 1));
        assert_ne!(s, derive_seed(0, 1, 0));
        assert_ne!(s, derive_seed(1, 0, 0));
        assert_eq!(s, derive_seed(0, 0, 0));
    }

    #[test]
    fn normal_moments() {
        let mut rng = seeded(5);
        let n = 200_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            let x = normal(&mut rng);
            m += x;
            v += x * x;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((v - 1.0).abs() < 0.02, "var {v}");
    }

    #[test]
    fn gumbel_argmax_is_softmax() {
        // Gumbel-max: P(argmax_i (phi_i + g_i) = i) = softmax(phi)_i.
        let phi = [1.0f64, 0.0, -1.0];
        let z: f64 = phi.iter().map(|p| p.exp()).sum();
        let want: Vec<f64> = phi.iter().map(|p| p.exp() / z).collect();
        let mut rng = seeded(9);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let scores: Vec<f64> = phi.iter().map(|p| p + gumbel(&mut rng)).collect();
            let best = (0..3)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap();
            counts[best] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - want[i]).abs() < 0.01, "i={i} freq={freq} want={}", want[i]);
        }
    }
}
