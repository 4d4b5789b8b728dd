use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Derives an independent stream from a base seed and a list of labels.
///
/// Every random draw in a run goes through a stream derived here, so any
/// sub-computation (iteration `i`, image `j`, ...) can be replayed without
/// replaying what came before it.
pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &l in labels {
        h = splitmix(h ^ l.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
