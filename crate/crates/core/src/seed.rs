/// Derives an independent 64-bit seed from a base seed and a path of stream
/// tags (splitmix64 finalizer applied per component).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x243F_6A88_85A3_08D3);
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
