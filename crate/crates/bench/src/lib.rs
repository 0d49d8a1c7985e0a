//! Shapes shared by the benchmarks.

/// Square projection size and full rank used for the compacted-layer sweep.
pub const SHAPE: (usize, usize, usize) = (3056, 3056, 512);

/// Kept ranks for the given fractions of `full`, at least one each.
pub fn kept_ranks(full: usize, fractions: &[f64]) -> Vec<usize> {
    fractions.iter().map(|f| ((full as f64 * f).round() as usize).clamp(1, full)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_round_and_stay_in_range() {
        assert_eq!(kept_ranks(512, &[0.1, 0.2, 1.0]), vec![51, 102, 512]);
        assert_eq!(kept_ranks(4, &[0.0, 2.0]), vec![1, 4]);
    }
}
