//! Private-set-intersection stand-in over salted digests.
//!
//! Each participant hashes its sample ids with a shared salt; only digests
//! travel. The label-holding client intersects the digest sets and orders
//! the result by its own raw ids ascending, which is the canonical aligned
//! order every participant ends up with.

use std::collections::HashSet;

use sha2::{Digest as _, Sha256};

pub type IdDigest = [u8; 32];

/// SHA-256 over salt (u64 LE) followed by id (u64 LE).
pub fn salted_digest(salt: u64, id: u64) -> IdDigest {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update(id.to_le_bytes());
    h.finalize().into()
}

pub fn digest_ids(salt: u64, ids: &[u64]) -> Vec<IdDigest> {
    ids.iter().map(|&id| salted_digest(salt, id)).collect()
}

/// Intersection from the label holder's perspective: its own raw ids that
/// appear (as digests) in every other participant's digest list, ascending.
pub fn intersect_digests(
    own_ids: &[u64],
    salt: u64,
    others: &[Vec<IdDigest>],
) -> Vec<u64> {
    let other_sets: Vec<HashSet<IdDigest>> = others
        .iter()
        .map(|ds| ds.iter().copied().collect())
        .collect();
    let mut out: Vec<u64> = own_ids
        .iter()
        .copied()
        .filter(|&id| {
            let d = salted_digest(salt, id);
            other_sets.iter().all(|s| s.contains(&d))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Multi-party alignment: ids present in every set, ascending. The first
/// set plays the label holder; the rest contribute digests only.
pub fn psi_align(id_sets: &[Vec<u64>], salt: u64) -> Vec<u64> {
    match id_sets.split_first() {
        None => Vec::new(),
        Some((own, rest)) => {
            let others: Vec<Vec<IdDigest>> =
                rest.iter().map(|ids| digest_ids(salt, ids)).collect();
            intersect_digests(own, salt, &others)
        }
    }
}
