//! Halton low-discrepancy points.

use super::Domain;

/// Prime bases, one per dimension.
pub const BASES: [u64; 48] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
    59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131,
    137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223,
];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// `count` points starting at sequence index `start` (index 0 is the origin
/// and is normally skipped), mapped into `domain`. Flat, `dim` per point.
pub fn halton_from(start: u64, count: usize, domain: &Domain) -> Vec<f64> {
    let d = domain.dim();
    assert!(d <= BASES.len(), "Halton sequence supports at most {} dimensions", BASES.len());
    let mut out = Vec::with_capacity(count * d);
    for i in 0..count as u64 {
        let u: Vec<f64> = BASES[..d].iter().map(|b| radical_inverse(start + i, *b)).collect();
        out.extend(domain.from_unit(&u));
    }
    out
}

/// The first `count` points (indices `1..=count`).
pub fn halton_sequence(count: usize, domain: &Domain) -> Vec<f64> {
    halton_from(1, count, domain)
}
