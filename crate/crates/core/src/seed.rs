//! Deterministic per-item random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `id` under run seed `seed`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id))
}

/// Independent generator for item `id`, so results do not depend on the order
/// or thread in which items are processed.
pub fn item_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_items_get_distinct_seeds() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
