use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use super::{invalid, DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Positive from the anchor's category, negative from another one.
    Category,
    /// Positive from the anchor's instance group, negative from another
    /// group of the same category.
    Instance,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Category => "category",
            Granularity::Instance => "instance",
        })
    }
}

impl FromStr for Granularity {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Granularity::Category),
            "instance" => Ok(Granularity::Instance),
            other => Err(invalid("granularity", format!("unknown granularity `{other}`"))),
        }
    }
}

/// Item ids of one training triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub granularity: Granularity,
}

/// Precomputed indices over the training split.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    granularity: Granularity,
    /// (id, category index, group key)
    anchors: Vec<(String, usize, String)>,
    categories: Vec<String>,
    photos_by_category: Vec<Vec<String>>,
    photos_by_group: BTreeMap<String, Vec<String>>,
    /// Per category, photos grouped by instance group.
    groups_by_category: Vec<BTreeMap<String, Vec<String>>>,
}

impl TripletSampler {
    pub fn new(manifest: &DatasetManifest, granularity: Granularity) -> Result<Self> {
        let categories: Vec<String> = manifest.categories();
        let cat_index = |c: &str| categories.binary_search_by(|x| x.as_str().cmp(c)).expect("known category");
        let mut photos_by_category = vec![Vec::new(); categories.len()];
        let mut groups_by_category = vec![BTreeMap::<String, Vec<String>>::new(); categories.len()];
        let mut photos_by_group: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in manifest.photos(Split::Train) {
            let c = cat_index(&p.category);
            photos_by_category[c].push(p.id.clone());
            groups_by_category[c]
                .entry(p.instance_group.clone())
                .or_default()
                .push(p.id.clone());
            photos_by_group.entry(p.instance_group.clone()).or_default().push(p.id.clone());
        }
        let anchors: Vec<(String, usize, String)> = manifest
            .sketches(Split::Train)
            .into_iter()
            .map(|s| (s.id.clone(), cat_index(&s.category), s.instance_group.clone()))
            .collect();
        if anchors.is_empty() {
            return Err(invalid("sample_triplets", "no training sketches"));
        }
        for (id, c, group) in &anchors {
            if photos_by_category[*c].is_empty() {
                return Err(invalid(
                    "sample_triplets",
                    format!("category `{}` has no training photos", categories[*c]),
                ));
            }
            if granularity == Granularity::Instance {
                if !photos_by_group.contains_key(group) {
                    return Err(invalid(
                        "sample_triplets",
                        format!("sketch `{id}` has no photo in instance group `{group}`"),
                    ));
                }
                if groups_by_category[*c].len() < 2 {
                    return Err(invalid(
                        "sample_triplets",
                        format!("category `{}` needs at least two instance groups", categories[*c]),
                    ));
                }
            }
        }
        if granularity == Granularity::Category && photos_by_category.iter().filter(|p| !p.is_empty()).count() < 2 {
            return Err(invalid("sample_triplets", "category mode needs photos from two categories"));
        }
        Ok(Self {
            granularity,
            anchors,
            categories,
            photos_by_category,
            photos_by_group,
            groups_by_category,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> TripletSample {
        let (anchor, c, group) = &self.anchors[rng.random_range(0..self.anchors.len())];
        let (positive, negative) = match self.granularity {
            Granularity::Category => {
                let pos = self.photos_by_category[*c].choose(rng).expect("non-empty");
                let others: Vec<usize> = (0..self.categories.len())
                    .filter(|&o| o != *c && !self.photos_by_category[o].is_empty())
                    .collect();
                let o = *others.choose(rng).expect("two categories");
                let neg = self.photos_by_category[o].choose(rng).expect("non-empty");
                (pos, neg)
            }
            Granularity::Instance => {
                let pos = self.photos_by_group[group].choose(rng).expect("non-empty");
                let others: Vec<&Vec<String>> = self.groups_by_category[*c]
                    .iter()
                    .filter(|(g, _)| *g != group)
                    .map(|(_, v)| v)
                    .collect();
                let neg = others.choose(rng).expect("two groups").choose(rng).expect("non-empty");
                (pos, neg)
            }
        };
        TripletSample {
            anchor: anchor.clone(),
            positive: positive.clone(),
            negative: negative.clone(),
            granularity: self.granularity,
        }
    }

    pub fn sample(&self, batch: usize, seed: u64) -> Vec<TripletSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch).map(|_| self.sample_one(&mut rng)).collect()
    }
}

/// Draws `batch` random triplets from the training split.
pub fn sample_triplets(
    manifest: &DatasetManifest,
    batch: usize,
    granularity: Granularity,
    seed: u64,
) -> Result<Vec<TripletSample>> {
    Ok(TripletSampler::new(manifest, granularity)?.sample(batch, seed))
}
