//! Seed derivation for independent, order-free random streams.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of integers (global seed, stream tag, device id, epoch, ...)
/// into one 64-bit seed. Different lists give unrelated seeds, so each
/// device/epoch stream is reproducible no matter which thread runs it.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(parts.len() as u64), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stream tags, so that e.g. the init stream of device 3 never coincides with
/// its batch stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const GRAPH: u64 = 4;
    pub const EVAL: u64 = 5;
}
