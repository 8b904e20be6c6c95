//! Per-group dropout masks.
//!
//! Each experience group owns one binary mask per network role. A mask
//! gates whole ensemble members: bit 1 keeps a member, bit 0 drops it.
//! The flipped mask selects exactly the members the group never trained,
//! which is what makes influence readable off a single set of parameters.
//!
//! Masks are never stored; they regenerate on demand from
//! `(master_seed, group_id, role)` through a fixed ChaCha8 generator, so
//! the bit patterns are identical across runs and platforms.

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Redraw attempts before forcing a usable mask (see [`mask_for`]).
const MAX_NONCE: u64 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("bit vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("overlap count {m} out of range for mask size {cap}")]
    OverlapOutOfRange { m: usize, cap: usize },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Network roles that receive independent masks for the same group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    Q1,
    Q2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Policy, Role::Q1, Role::Q2];

    fn tag(self) -> &'static str {
        match self {
            Role::Policy => "mask-policy",
            Role::Q1 => "mask-q1",
            Role::Q2 => "mask-q2",
        }
    }
}

/// Mask generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Number of maskable blocks (ensemble members) per network.
    pub ensemble_size: usize,
    /// Probability that a bit is 0 (the member is dropped).
    pub dropout_rate: f64,
    /// Experiences per group.
    pub group_size: usize,
    /// Root of the mask seed stream.
    pub master_seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.ensemble_size < 2 {
            return Err(format!("ensemble_size must be >= 2, got {}", self.ensemble_size));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) || !self.dropout_rate.is_finite() {
            return Err(format!("dropout_rate must be in [0, 1], got {}", self.dropout_rate));
        }
        if self.group_size < 1 {
            return Err("group_size must be >= 1".to_string());
        }
        Ok(())
    }
}

/// A group's binary mask for one network role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    pub group_id: u64,
    pub role: Role,
    pub bits: Vec<bool>,
    /// Nonce that produced a usable draw; nonzero values are logged by the
    /// harness.
    pub nonce: u64,
}

impl GroupMask {
    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Group identifier of the experience inserted at `iteration_index`.
pub fn group_id_of(iteration_index: u64, group_size: usize) -> u64 {
    debug_assert!(group_size >= 1);
    iteration_index / group_size as u64
}

/// One unconditioned mask draw: each bit is independently 0 with
/// probability `dropout_rate`. Used directly by the overlap statistics,
/// which sample the raw mask law.
pub fn draw_bits(spec: &MaskSpec, group_id: u64, role: Role, nonce: u64) -> Vec<bool> {
    let seed = seeds::derive(
        seeds::derive(spec.master_seed, role.tag(), group_id),
        "nonce",
        nonce,
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Integer threshold comparison keeps the draw exact and portable.
    let threshold = (spec.dropout_rate * 2f64.powi(64)) as u128;
    (0..spec.ensemble_size)
        .map(|_| u128::from(rng.next_u64()) >= threshold)
        .collect()
}

/// Deterministic mask for `(group_id, role)`.
///
/// Draws are redrawn with an incremented nonce while they are all-zero, or
/// all-ones at an interior dropout rate (an all-ones mask would make the
/// flipped mask empty and influence evaluation undefined). After
/// `MAX_NONCE` attempts one bit is forced; callers can detect redraws via
/// the returned nonce.
pub fn mask_for(group_id: u64, role: Role, spec: &MaskSpec) -> GroupMask {
    let interior = spec.dropout_rate > 0.0 && spec.dropout_rate < 1.0;
    for nonce in 0..MAX_NONCE {
        let bits = draw_bits(spec, group_id, role, nonce);
        let ones = bits.iter().filter(|b| **b).count();
        let usable = ones > 0 && (!interior || ones < spec.ensemble_size);
        if usable {
            return GroupMask { group_id, role, bits, nonce };
        }
    }
    // Degenerate rates only; force a deterministic valid pattern.
    let mut bits = draw_bits(spec, group_id, role, MAX_NONCE);
    let k = (group_id % spec.ensemble_size as u64) as usize;
    if bits.iter().all(|b| !*b) {
        bits[k] = true;
    } else {
        bits[k] = false;
        if bits.iter().all(|b| !*b) {
            bits[(k + 1) % spec.ensemble_size] = true;
        }
    }
    GroupMask { group_id, role, bits, nonce: MAX_NONCE }
}

/// Elementwise negation: the flipped mask `w` with `w[k] = 1 - m[k]`.
pub fn flip(mask: &GroupMask) -> GroupMask {
    GroupMask {
        group_id: mask.group_id,
        role: mask.role,
        bits: mask.bits.iter().map(|b| !b).collect(),
        nonce: mask.nonce,
    }
}

/// Number of positions where the two bit vectors agree.
pub fn overlap_count(a: &[bool], b: &[bool]) -> Result<usize, MaskError> {
    if a.len() != b.len() {
        return Err(MaskError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count())
}

/// Probability that a single position of two independent masks agrees:
/// `q = p^2 + (1-p)^2 = 2p^2 - 2p + 1`.
pub fn match_probability(p: f64) -> f64 {
    2.0 * p * p - 2.0 * p + 1.0
}

/// Probability that two independent masks of size `ensemble_size` agree in
/// exactly `m` positions: `C(M, m) q^m (1-q)^(M-m)`.
pub fn overlap_probability(ensemble_size: usize, m: usize, p: f64) -> Result<f64, MaskError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(MaskError::BadProbability(p));
    }
    if m > ensemble_size {
        return Err(MaskError::OverlapOutOfRange { m, cap: ensemble_size });
    }
    let q = match_probability(p);
    // Multiplicative binomial coefficient; exact to ~M ulps in f64.
    let mut coeff = 1.0f64;
    for i in 1..=m {
        coeff *= (ensemble_size - m + i) as f64 / i as f64;
    }
    Ok(coeff * q.powi(m as i32) * (1.0 - q).powi((ensemble_size - m) as i32))
}

/// Expected number of overlapping positions: `M * (2p^2 - 2p + 1)`.
pub fn expected_overlap(ensemble_size: usize, p: f64) -> f64 {
    ensemble_size as f64 * match_probability(p)
}

/// Empirical overlap mean and standard deviation over `samples`
/// independently drawn mask pairs (raw, unconditioned draws).
pub fn sample_overlap_stats(spec: &MaskSpec, samples: usize, seed: u64) -> (f64, f64) {
    let stats_spec = MaskSpec { master_seed: seed, ..*spec };
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for i in 0..samples {
        let a = draw_bits(&stats_spec, 2 * i as u64, Role::Policy, 0);
        let b = draw_bits(&stats_spec, 2 * i as u64 + 1, Role::Policy, 0);
        let m = overlap_count(&a, &b).expect("equal lengths") as f64;
        sum += m;
        sum_sq += m * m;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(m: usize, p: f64) -> MaskSpec {
        MaskSpec { ensemble_size: m, dropout_rate: p, group_size: 5000, master_seed: 99 }
    }

    #[test]
    fn group_id_examples() {
        assert_eq!(group_id_of(4999, 5000), 0);
        assert_eq!(group_id_of(5000, 5000), 1);
        assert_eq!(group_id_of(0, 1), 0);
    }

    #[test]
    fn mask_for_is_deterministic() {
        let s = spec(20, 0.5);
        let a = mask_for(3, Role::Q1, &s);
        let b = mask_for(3, Role::Q1, &s);
        assert_eq!(a, b);
    }

    #[test]
    fn roles_get_independent_masks() {
        let s = spec(20, 0.5);
        let pol = mask_for(3, Role::Policy, &s);
        let q1 = mask_for(3, Role::Q1, &s);
        let q2 = mask_for(3, Role::Q2, &s);
        assert!(pol.bits != q1.bits || q1.bits != q2.bits);
    }

    #[test]
    fn zero_rate_gives_all_ones() {
        let s = spec(8, 0.0);
        let m = mask_for(0, Role::Policy, &s);
        assert!(m.bits.iter().all(|b| *b));
        assert_eq!(m.nonce, 0);
    }

    #[test]
    fn interior_rate_masks_are_usable_both_ways() {
        let s = spec(4, 0.5);
        for g in 0..200 {
            let m = mask_for(g, Role::Q2, &s);
            let ones = m.active_count();
            assert!(ones > 0 && ones < 4, "group {g} gave {ones} active");
        }
    }

    #[test]
    fn active_count_mean_matches_binomial() {
        // p = 0.5, M = 20, 1e4 draws: mean active within 3 sigma of 10.
        let s = spec(20, 0.5);
        let n = 10_000usize;
        let total: usize = (0..n)
            .map(|g| draw_bits(&s, g as u64, Role::Policy, 0).iter().filter(|b| **b).count())
            .sum();
        let mean = total as f64 / n as f64;
        let sigma = (20.0f64 * 0.25).sqrt();
        assert!((mean - 10.0).abs() <= 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn flip_examples() {
        let m = GroupMask { group_id: 0, role: Role::Policy, bits: vec![true, false, true], nonce: 0 };
        assert_eq!(flip(&m).bits, vec![false, true, false]);
        let ones = GroupMask { group_id: 0, role: Role::Policy, bits: vec![true; 4], nonce: 0 };
        assert!(flip(&ones).bits.iter().all(|b| !b));
    }

    #[test]
    fn overlap_count_examples() {
        assert_eq!(overlap_count(&[true, false], &[true, true]).unwrap(), 1);
        let x = [true, false, true, true];
        assert_eq!(overlap_count(&x, &x).unwrap(), 4);
        assert_eq!(overlap_count(&[true], &[true, false]), Err(MaskError::LengthMismatch(1, 2)));
    }

    #[test]
    fn overlap_probability_examples() {
        assert!((overlap_probability(2, 2, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((overlap_probability(1, 1, 0.5).unwrap() - 0.5).abs() < 1e-15);
        // Oracle: enumerate all pairs of 3-bit masks with product weights.
        let brute = |m_target: usize, p: f64| -> f64 {
            let w = |bits: u32| -> f64 {
                (0..3).map(|k| if bits >> k & 1 == 1 { 1.0 - p } else { p }).product()
            };
            let mut total = 0.0;
            for a in 0u32..8 {
                for b in 0u32..8 {
                    let overlap = (0..3).filter(|k| a >> k & 1 == b >> k & 1).count();
                    if overlap == m_target {
                        total += w(a) * w(b);
                    }
                }
            }
            total
        };
        assert!((overlap_probability(3, 1, 0.5).unwrap() - 0.375).abs() < 1e-15);
        for m in 0..=3 {
            for &p in &[0.0, 0.1, 0.25, 0.5, 0.9] {
                let got = overlap_probability(3, m, p).unwrap();
                assert!((got - brute(m, p)).abs() < 1e-12, "M=3 m={m} p={p}");
            }
        }
        assert!(overlap_probability(3, 4, 0.5).is_err());
        assert!(overlap_probability(3, 1, 1.5).is_err());
    }

    #[test]
    fn overlap_probability_sums_to_one() {
        for &m_size in &[1usize, 8, 20, 64] {
            for &p in &[0.0, 0.1, 0.25, 0.5, 0.77, 1.0] {
                let total: f64 =
                    (0..=m_size).map(|m| overlap_probability(m_size, m, p).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-12, "M={m_size} p={p} total={total}");
            }
        }
    }

    #[test]
    fn expected_overlap_examples() {
        assert!((expected_overlap(20, 0.5) - 10.0).abs() < 1e-12);
        assert!((expected_overlap(7, 0.0) - 7.0).abs() < 1e-12);
        assert!((expected_overlap(20, 0.25) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn grid_minimum_at_half() {
        for m in 1..=64usize {
            let values: Vec<f64> = (0..=20).map(|i| expected_overlap(m, i as f64 * 0.05)).collect();
            let argmin = values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmin, 10, "M={m}");
            // Unique minimum on the grid.
            assert!(values.iter().enumerate().all(|(i, v)| i == 10 || *v > values[10]));
        }
    }

    #[test]
    fn pair_statistics_match_expectation() {
        for &(m, p) in &[(8usize, 0.5f64), (20, 0.25), (64, 0.1)] {
            let s = spec(m, p);
            let n = 10_000usize;
            let (mean, _) = sample_overlap_stats(&s, n, 123);
            let q = match_probability(p);
            let sigma = (m as f64 * q * (1.0 - q)).sqrt();
            let expected = expected_overlap(m, p);
            assert!(
                (mean - expected).abs() <= 3.0 * sigma / (n as f64).sqrt(),
                "M={m} p={p}: mean {mean} vs {expected}"
            );
        }
    }

    proptest! {
        #[test]
        fn flip_is_involution(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let m = GroupMask { group_id: 1, role: Role::Q1, bits, nonce: 0 };
            prop_assert_eq!(flip(&flip(&m)).bits, m.bits);
        }

        #[test]
        fn mask_and_flip_never_overlap(group in 0u64..512, m_size in 2usize..32) {
            let s = spec(m_size, 0.5);
            let m = mask_for(group, Role::Policy, &s);
            let w = flip(&m);
            prop_assert_eq!(overlap_count(&m.bits, &w.bits).unwrap(), 0);
        }

        #[test]
        fn self_overlap_is_length(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            prop_assert_eq!(overlap_count(&bits, &bits).unwrap(), bits.len());
        }
    }
}
