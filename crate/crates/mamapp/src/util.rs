/// 64-bit FNV-1a hash. Used to fingerprint configs in run summaries and to
/// derive per-sample random seeds; stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent RNG seed from a base seed and a set of indices
/// (e.g. epoch and sample number). Equal inputs give equal seeds, so shuffles
/// and augmentations are reproducible regardless of how work is scheduled.
pub fn derive_seed(base: u64, stream: u64, indices: &[u64]) -> u64 {
    let mut h = fnv1a64(&base.to_le_bytes());
    h ^= splitmix64(stream.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for &ix in indices {
        h = splitmix64(h ^ splitmix64(ix.wrapping_add(0x2545_f491_4f6c_dd1d)));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
