//! Counter-based deterministic random draws.
//!
//! Every draw is a pure function of (seed, parameter name, element index), so
//! generation order and parallelism cannot change the values. The generator
//! is the splitmix64 output function applied to a keyed counter.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key for one parameter's stream: the seed folded with an FNV-1a hash of
/// the name.
pub fn stream_key(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed.wrapping_mul(GOLDEN) ^ h)
}

fn word(key: u64, counter: u64) -> u64 {
    mix(key.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

/// Uniform draw in (0, 1], from the stream's `counter`-th word.
pub fn uniform(key: u64, counter: u64) -> f64 {
    ((word(key, counter) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw for element `index`, via Box-Muller over two uniform
/// words (counters `2*index` and `2*index + 1`).
pub fn gaussian(key: u64, index: u64) -> f64 {
    let u1 = uniform(key, 2 * index);
    let u2 = uniform(key, 2 * index + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
