use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::seed::Rng;

/// Top-`m` clients by competence, highest first, ties to the lower id.
/// Returns every client when fewer than `m` are available.
pub fn select_experts(competence: &BTreeMap<u32, f64>, m: usize) -> Vec<u32> {
    let mut ranked: Vec<(u32, f64)> = competence.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(m).map(|(id, _)| id).collect()
}

/// `m` distinct clients drawn uniformly from `1..=k`, in ascending order.
pub fn random_experts(rng: &mut Rng, k: u32, m: usize) -> Vec<u32> {
    let m = m.min(k as usize);
    let mut ids: Vec<u32> = sample(rng, k as usize, m)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn comp(pairs: &[(u32, f64)]) -> BTreeMap<u32, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn top_m_with_id_ties() {
        let c = comp(&[(1, 0.9), (2, 0.2), (3, 0.5), (4, 0.5)]);
        assert_eq!(select_experts(&c, 2), vec![1, 3]);
        let flat = comp(&[(1, 0.4), (2, 0.4), (3, 0.4), (4, 0.4), (5, 0.4)]);
        assert_eq!(select_experts(&flat, 3), vec![1, 2, 3]);
        assert_eq!(select_experts(&c, 10), vec![1, 3, 4, 2]);
    }

    #[test]
    fn random_subset_is_distinct_and_in_range() {
        let mut rng = seed::rng(4);
        for _ in 0..100 {
            let ids = random_experts(&mut rng, 8, 3);
            assert_eq!(ids.len(), 3);
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
            assert!(ids.iter().all(|&i| (1..=8).contains(&i)));
        }
        assert_eq!(random_experts(&mut rng, 2, 5).len(), 2);
    }
}
