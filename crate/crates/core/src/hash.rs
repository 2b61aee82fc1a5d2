//! Stable, platform-independent hashing.
//!
//! The simulator derives all of its randomness from these hashes so that
//! results depend only on (seed, image, category, format) and never on
//! scheduling or iteration order. `std::hash` is unsuitable here: its
//! output is randomized per process.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte stream with a splitmix64 finalizer.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // separator so ("ab","c") != ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a hash to a uniform draw in [0, 1).
pub(crate) fn unit_interval(h: u64) -> f64 {
    // top 53 bits give an exact dyadic rational in [0, 1)
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Short hex digest used for logging prompts without storing them.
pub(crate) fn hex_digest(text: &str) -> String {
    format!("{:016x}", stable_hash(&[text.as_bytes()]))
}
