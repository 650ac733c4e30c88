//! Deterministic inputs for the criterion benchmarks.

use cerberus_core::rulebase::Polarity;
use cerberus_core::scoring::{EmbeddingVector, PoolEmbeddings};
use image::{Rgb, RgbImage};

/// Cheap reproducible values in [-1, 1).
fn hash01(seed: u64, i: u64) -> f64 {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

pub fn vector(seed: u64, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim as u64).map(|i| hash01(seed, i)).collect()).expect("non-zero")
}

/// `n` candidates, the first half normal and the rest anomalous.
pub fn pool(n: usize, dim: usize) -> PoolEmbeddings {
    let vecs: Vec<EmbeddingVector> = (0..n as u64).map(|i| vector(i + 1, dim)).collect();
    let pol: Vec<Polarity> = (0..n).map(|i| if i < n / 2 { Polarity::Normal } else { Polarity::Anomalous }).collect();
    PoolEmbeddings::new(&vecs, &pol).expect("valid pool")
}

pub fn scores(n: usize) -> (Vec<f64>, Vec<bool>) {
    let s: Vec<f64> = (0..n as u64).map(|i| hash01(7, i)).collect();
    let l = (0..n).map(|i| i % 10 == 0).collect();
    (s, l)
}

/// Textured background with a bright square whose corner sits at `offset`.
pub fn frame(width: u32, height: u32, offset: u32) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        if (offset..offset + 24).contains(&x) && (offset..offset + 24).contains(&y) {
            Rgb([240, 240, 240])
        } else {
            let v = ((x * 7 + y * 13) % 64) as u8 + 40;
            Rgb([v, v, v])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_deterministic() {
        assert_eq!(vector(3, 16), vector(3, 16));
        assert_ne!(vector(3, 16), vector(4, 16));
        assert_eq!(pool(10, 8).len(), 10);
        assert_ne!(frame(64, 64, 0), frame(64, 64, 8));
    }
}
