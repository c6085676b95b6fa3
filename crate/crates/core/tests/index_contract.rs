use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sbir_core::index::EmbeddingIndex;

fn build(n: usize, dim: usize, seed: u64, coarse: bool) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ix = EmbeddingIndex::new(dim).unwrap();
    for i in 0..n {
        // Coarse values produce many exact distance ties.
        let v: Vec<f32> = (0..dim)
            .map(|_| if coarse { rng.random_range(-2i32..=2) as f32 } else { rng.sample(StandardNormal) })
            .collect();
        ix.add(format!("id{:05}", (i * 7919) % 100_000), &v, Some(format!("c{}", i % 5))).unwrap();
    }
    ix.snapshot();
    ix
}

fn brute_force(ix: &EmbeddingIndex, q: &[f32], k: usize, scale: f32) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = (0..ix.len())
        .map(|i| {
            let d: f64 = ix
                .vector(i)
                .iter()
                .zip(q)
                .map(|(&v, &x)| (scale as f64 * x as f64 - v as f64).powi(2))
                .sum();
            (ix.ids()[i].clone(), d.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn hits(ix: &EmbeddingIndex, q: &[f32], k: usize, scale: f32) -> Vec<(String, f64)> {
    ix.query(q, k, scale).unwrap().into_iter().map(|h| (h.id, h.distance)).collect()
}

#[test]
fn flickr_scale_payload() {
    let ix = build(15_024, 128, 1, false);
    assert_eq!(ix.vector_payload_bytes(), 7_692_288);
    let bytes = ix.to_bytes().unwrap();
    assert_eq!(bytes.len() as u64, ix.file_size());
    let ids: u64 = ix.ids().iter().map(|s| s.len() as u64).sum();
    let cats: u64 = (0..ix.len()).map(|i| ix.category(i).unwrap().len() as u64).sum();
    assert_eq!(bytes.len() as u64, 16 + 15_024 * 8 + ids + cats + 7_692_288);
}

#[test]
fn ten_thousand_entries_match_full_sort() {
    let ix = build(10_000, 32, 2, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1, 10, 500, 10_000] {
        let q: Vec<f32> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(hits(&ix, &q, k, 2.0), brute_force(&ix, &q, k, 2.0));
    }
}

#[test]
fn save_load_preserves_queries_and_bytes() {
    let ix = build(200, 16, 4, false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("photos.sbix");
    ix.save(&path).unwrap();
    let back = EmbeddingIndex::load(&path).unwrap();
    for i in 0..ix.len() {
        let (a, b): (Vec<u32>, Vec<u32>) = (
            ix.vector(i).iter().map(|v| v.to_bits()).collect(),
            back.vector(i).iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let q: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(ix.query(&q, 10, 2.0).unwrap(), back.query(&q, 10, 2.0).unwrap());
    }
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
    assert_eq!(ix.to_bytes().unwrap(), build(200, 16, 4, false).to_bytes().unwrap());

    let full = std::fs::read(&path).unwrap();
    std::fs::write(&path, &full[..full.len() / 2]).unwrap();
    assert!(EmbeddingIndex::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ranking_matches_exhaustive_sort(
        n in 1usize..=10_000, dim in 1usize..8, k in 1usize..50, coarse in any::<bool>(), seed in any::<u64>(),
    ) {
        let ix = build(n, dim, seed, coarse);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1i32..=1) as f32 * 0.5).collect();
        let got = hits(&ix, &q, k, 2.0);
        prop_assert_eq!(got.len(), k.min(n));
        prop_assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(got, brute_force(&ix, &q, k, 2.0));
    }

    #[test]
    fn scale_contract(n in 1usize..300, dim in 1usize..16, seed in any::<u64>()) {
        let ix = build(n, dim, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let q: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let doubled: Vec<f32> = q.iter().map(|v| 2.0 * v).collect();
        prop_assert_eq!(ix.query(&q, n, 2.0).unwrap(), ix.query(&doubled, n, 1.0).unwrap());
    }
}
