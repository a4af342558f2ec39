#![allow(dead_code)]

pub mod stub;

use crsllm::corpus::{generate_synthetic_corpus, CategoryCorpus, SyntheticSpec};
use crsllm::tasks::build_instances;
use crsllm::{TaskInstance, TaskKind};

pub const CANDIDATE_SEED: u64 = 7;

/// The default synthetic corpus: one category, 5 attributes, 50 products,
/// 200 dialogues.
pub fn default_corpus() -> CategoryCorpus {
    generate_synthetic_corpus(&SyntheticSpec::default())
        .unwrap()
        .remove(0)
}

/// Instances of `kind` over every split.
pub fn all_instances(corpus: &CategoryCorpus, kind: TaskKind) -> Vec<TaskInstance> {
    let dialogues: Vec<_> = corpus.split.iter().cloned().collect();
    build_instances(&dialogues, &corpus.catalog, kind, CANDIDATE_SEED).unwrap()
}

pub fn split_instances(
    corpus: &CategoryCorpus,
    kind: TaskKind,
) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    (
        build_instances(&corpus.split.train, &corpus.catalog, kind, CANDIDATE_SEED).unwrap(),
        build_instances(&corpus.split.test, &corpus.catalog, kind, CANDIDATE_SEED).unwrap(),
    )
}
