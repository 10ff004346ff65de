//! Deterministic synthetic corpus used by the bundled test fixture.
//!
//! Images and descriptions are drawn around a handful of topic centres so
//! that retrieval has real structure; description texts come from the
//! matching topic vocabulary. Everything is a pure function of the seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding_store::{normalize_vector, CatalogEntry, DescriptionCatalog, EmbeddingStore, StoreError};
use crate::pipeline::{to_jsonl, PredictionRecord};

pub const FIXTURE_SEED: u64 = 20_240_611;

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub seed: u64,
    pub images: usize,
    pub descriptions: usize,
    pub dim: usize,
    /// Catalog entries whose source image is on the exclusion list.
    pub overlapping: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: FIXTURE_SEED,
            images: 20,
            descriptions: 200,
            dim: 16,
            overlapping: 94,
        }
    }
}

struct Topic {
    subjects: &'static [&'static str],
    verbs: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: [Topic; 5] = [
    Topic {
        subjects: &["a man", "a skateboarder", "a young boy", "a person"],
        verbs: &["rides a skateboard", "does a trick", "jumps", "balances"],
        places: &["on a ramp", "in the air", "at the skate park", "on the street"],
    },
    Topic {
        subjects: &["a brown dog", "a puppy", "a black dog", "two dogs"],
        verbs: &["runs", "plays with a ball", "lies", "chases a frisbee"],
        places: &["on the grass", "in a park", "near a fence", "on a field"],
    },
    Topic {
        subjects: &["a woman", "a chef", "a cook", "a girl"],
        verbs: &["cuts vegetables", "stirs a pot", "holds a knife", "bakes bread"],
        places: &["in a kitchen", "at the counter", "near the stove", "by the sink"],
    },
    Topic {
        subjects: &["a surfer", "a child", "people", "a swimmer"],
        verbs: &["walks", "rides a wave", "carries a board", "stands"],
        places: &["on the beach", "in the ocean", "near the water", "on the sand"],
    },
    Topic {
        subjects: &["a red bus", "a taxi", "a bicycle", "a truck"],
        verbs: &["drives", "waits", "is parked", "turns"],
        places: &["down the road", "at the intersection", "near a building", "on a city street"],
    },
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn sentence(rng: &mut ChaCha8Rng, topic: &Topic) -> String {
    format!(
        "{} {} {}",
        pick(rng, topic.subjects),
        pick(rng, topic.verbs),
        pick(rng, topic.places)
    )
}

fn around(rng: &mut ChaCha8Rng, centre: &[f32], spread: f32) -> Vec<f32> {
    let v: Vec<f32> = centre
        .iter()
        .map(|c| c + spread * rng.random_range(-1.0f32..1.0))
        .collect();
    normalize_vector(&v).expect("perturbed centre is nonzero")
}

/// All fixture artifacts, in memory.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub images: EmbeddingStore,
    pub descriptions: EmbeddingStore,
    pub catalog: DescriptionCatalog,
    /// Source image ids to exclude, one per line, sorted.
    pub exclusions: Vec<String>,
    pub predictions: Vec<PredictionRecord>,
}

pub fn generate(spec: FixtureSpec) -> Result<Fixture, StoreError> {
    if spec.overlapping > spec.descriptions {
        return Err(StoreError::Invalid("more overlapping entries than descriptions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<Vec<f32>> = (0..TOPICS.len())
        .map(|_| (0..spec.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();

    let mut image_rows = Vec::with_capacity(spec.images);
    let mut predictions = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let t = i % TOPICS.len();
        let id = format!("img{i:02}");
        image_rows.push((id.clone(), around(&mut rng, &centres[t], 0.5)));
        predictions.push(PredictionRecord {
            image_id: id,
            prediction: sentence(&mut rng, &TOPICS[t]),
        });
    }

    let mut desc_rows = Vec::with_capacity(spec.descriptions);
    let mut entries = Vec::with_capacity(spec.descriptions);
    for j in 0..spec.descriptions {
        let t = j % TOPICS.len();
        let id = format!("d{j:03}");
        desc_rows.push((id.clone(), around(&mut rng, &centres[t], 0.7)));
        entries.push(CatalogEntry {
            id,
            text: sentence(&mut rng, &TOPICS[t]),
            source_image_id: Some(format!("vg{j:04}")),
        });
    }

    let mut order: Vec<usize> = (0..spec.descriptions).collect();
    order.shuffle(&mut rng);
    let mut exclusions: Vec<String> = order[..spec.overlapping]
        .iter()
        .map(|&j| format!("vg{j:04}"))
        .collect();
    exclusions.sort();

    Ok(Fixture {
        images: EmbeddingStore::from_rows(image_rows, true)?,
        descriptions: EmbeddingStore::from_rows(desc_rows, true)?,
        catalog: DescriptionCatalog::new(entries)?,
        exclusions,
        predictions,
    })
}

pub const FIXTURE_FILES: [&str; 6] = [
    "images.raps",
    "descriptions.raps",
    "catalog.jsonl",
    "exclusions.txt",
    "predictions.jsonl",
    "fixture.conf",
];

const FIXTURE_CONF: &str = "\
# bundled synthetic fixture; paths are relative to this file
k = 16
m = 4
seed = 7
backend = fallback
image_store = images.raps
description_store = descriptions.raps
catalog = catalog.jsonl
exclusions = exclusions.txt
predictions = predictions.jsonl
";

impl Fixture {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let io = |e: StoreError| std::io::Error::other(e.to_string());
        self.images.save(dir.join("images.raps")).map_err(io)?;
        self.descriptions.save(dir.join("descriptions.raps")).map_err(io)?;
        std::fs::write(dir.join("catalog.jsonl"), self.catalog.to_jsonl())?;
        let mut excl = String::from("# source images shared with the evaluation split\n");
        for id in &self.exclusions {
            excl.push_str(id);
            excl.push('\n');
        }
        std::fs::write(dir.join("exclusions.txt"), excl)?;
        std::fs::write(dir.join("predictions.jsonl"), to_jsonl(&self.predictions))?;
        std::fs::write(dir.join("fixture.conf"), FIXTURE_CONF)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{encode_store, overlap_filter};
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(FixtureSpec::default()).unwrap();
        let b = generate(FixtureSpec::default()).unwrap();
        assert_eq!(encode_store(&a.images), encode_store(&b.images));
        assert_eq!(encode_store(&a.descriptions), encode_store(&b.descriptions));
        assert_eq!(a.catalog.to_jsonl(), b.catalog.to_jsonl());
    }

    #[test]
    fn overlap_share() {
        let f = generate(FixtureSpec::default()).unwrap();
        let excluded: HashSet<String> = f.exclusions.iter().cloned().collect();
        assert_eq!(overlap_filter(&f.catalog, &excluded).len(), 106);
    }
}
