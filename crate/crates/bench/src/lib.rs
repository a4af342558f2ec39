//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crsllm::corpus::{generate_synthetic_corpus, CategoryCorpus, SyntheticSpec};
use crsllm::crs::RecommendationScores;
use crsllm::tasks::build_instances;
use crsllm::{TaskInstance, TaskKind};

/// Random prediction/gold id lists drawn from a small vocabulary.
pub fn id_lists(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = (0..rng.gen_range(0..=len))
                .map(|_| rng.gen_range(0..vocab))
                .collect();
            let b = (0..rng.gen_range(0..=len))
                .map(|_| rng.gen_range(0..vocab))
                .collect();
            (a, b)
        })
        .collect()
}

/// Twenty-candidate score vectors with a gold id for each.
pub fn rankings(n: usize, seed: u64) -> Vec<(RecommendationScores, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ids: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
            let raw: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let gold = ids[rng.gen_range(0..20)].clone();
            let scores =
                RecommendationScores::new(ids, raw.iter().map(|x| x / total).collect()).unwrap();
            (scores, gold)
        })
        .collect()
}

/// Tokenised responses of random words.
pub fn responses(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..rng.gen_range(1..30))
                .map(|_| format!("w{}", rng.gen_range(0..500)))
                .collect()
        })
        .collect()
}

pub fn small_corpus() -> CategoryCorpus {
    let spec = SyntheticSpec {
        dialogues: 60,
        ..SyntheticSpec::default()
    };
    generate_synthetic_corpus(&spec).unwrap().remove(0)
}

pub fn instances(corpus: &CategoryCorpus, kind: TaskKind) -> Vec<TaskInstance> {
    build_instances(&corpus.split.train, &corpus.catalog, kind, 3).unwrap()
}
