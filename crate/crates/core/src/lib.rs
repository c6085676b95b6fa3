//! Sketch-based image retrieval with triplet convnets.

pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod index;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

/// Mixes a base seed with tags into an independent stream seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
