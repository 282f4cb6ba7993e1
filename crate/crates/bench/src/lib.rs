//! Seeded fixtures shared by the kernel benchmarks.

use sparsed::pattern::build_pattern;
use sparsed::{BlockMask, HeadInputs, Matrix, SeededRng, SparseDConfig};

/// One head of uniform(-1, 1) projections.
pub fn random_head(seq_len: usize, head_dim: usize, seed: u64) -> HeadInputs {
    let mut rng = SeededRng::new(seed);
    let mut m = || Matrix::from_fn(seq_len, head_dim, |_, _| rng.uniform(-1.0, 1.0));
    HeadInputs::new(m(), m(), m()).expect("matching shapes")
}

/// Mask selected from `head`'s own scores with the prompt taking half the sequence.
pub fn captured_mask(head: &HeadInputs, block_size: usize, rho: f64) -> BlockMask {
    let config = SparseDConfig::new(rho, 0.2, block_size, 10).expect("valid config");
    build_pattern(&head.q, &head.k, head.seq_len() / 2, &config, 1).expect("pattern")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(random_head(16, 4, 3), random_head(16, 4, 3));
        assert_ne!(random_head(16, 4, 3), random_head(16, 4, 4));
        let h = random_head(128, 8, 1);
        let mask = captured_mask(&h, 16, 0.25);
        assert_eq!(mask.density(), 0.25);
    }
}
