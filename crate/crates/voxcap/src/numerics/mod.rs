//! Numeric foundation: tensors, seeded randomness, reverse-mode differentiation,
//! and the scalar primitives (cosine similarity, entropy) the losses build on.

pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use rng::{fnv1a, RngState, SeedRng};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
///
/// Zero-norm inputs are a hard error rather than a silent zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            format!("equal nonzero lengths, got {}", a.len()),
            format!("{}", b.len()),
        ));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Shannon entropy (natural log) of a probability vector; 0*log 0 counts as 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::validation("entropy of an empty vector"));
    }
    let mut sum = 0.0;
    for &v in p {
        if v < 0.0 {
            return Err(Error::validation(format!(
                "entropy input has negative entry {v}"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "entropy input sums to {sum}, expected 1 within 1e-6"
        )));
    }
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h.max(0.0))
}

/// Order-sensitive checksum over the exact bit patterns of a value stream.
/// Used for frozen-parameter audits and determinism checks.
pub fn checksum_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

pub fn checksum_tensor(t: &Tensor) -> u64 {
    checksum_f64s(t.data().iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identical_unit_vectors() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed() {
        // <a,b> = 8, |a| = |b| = 3.
        let s = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        let err = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn cosine_self_similarity_and_symmetry() {
        let mut rng = SeedRng::new(5);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(
                cosine_similarity(&a, &b).unwrap(),
                cosine_similarity(&b, &a).unwrap()
            );
        }
    }

    #[test]
    fn cosine_exact_under_power_of_two_rescale() {
        let a = [0.3, -1.7, 2.2, 0.9];
        let b = [1.1, 0.4, -0.6, 2.5];
        let a2: Vec<f64> = a.iter().map(|v| v * 4.0).collect();
        assert_eq!(
            cosine_similarity(&a, &b).unwrap().to_bits(),
            cosine_similarity(&a2, &b).unwrap().to_bits()
        );
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_uniform_closed_form() {
        let h = entropy(&[0.25; 4]).unwrap();
        assert!((h - 4.0_f64.ln()).abs() < 1e-12);
        let h2 = entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((h2 - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn entropy_bounded_by_log_m() {
        let mut rng = SeedRng::new(17);
        for _ in 0..200 {
            let m = 1 + rng.usize_below(12);
            let mut p: Vec<f64> = (0..m).map(|_| rng.uniform() + 1e-9).collect();
            let s: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= s;
            }
            let h = entropy(&p).unwrap();
            assert!(h <= (m as f64).ln() + 1e-9, "H={h} exceeds log {m}");
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn checksum_detects_single_bit_change() {
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        let c1 = checksum_tensor(&a);
        b.data_mut()[1] = f64::from_bits(2.0f64.to_bits() ^ 1);
        assert_ne!(c1, checksum_tensor(&b));
        assert_eq!(c1, checksum_tensor(&a));
    }
}
