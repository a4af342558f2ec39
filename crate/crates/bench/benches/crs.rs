use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use crsllm::crs::{CrsSettings, UnifiedCrs};
use crsllm::TaskKind;
use crsllm_bench::{instances, small_corpus};

fn bench_crs(c: &mut Criterion) {
    let corpus = small_corpus();
    let crs = UnifiedCrs::tiny([&corpus.catalog], CrsSettings::default());
    let rec = instances(&corpus, TaskKind::Recommendation);
    let und = instances(&corpus, TaskKind::Understanding);
    let seqs: Vec<_> = rec
        .iter()
        .take(50)
        .map(|i| crs.prompt_for(i).unwrap())
        .collect();
    let ids: Vec<Vec<String>> = rec
        .iter()
        .take(50)
        .map(|i| {
            i.candidates
                .iter()
                .map(|c| c.product.product_id.clone())
                .collect()
        })
        .collect();

    c.bench_function("crs/serialize 50 prompts", |b| {
        b.iter(|| {
            for i in rec.iter().take(50) {
                black_box(crs.prompt_for(i).unwrap());
            }
        })
    });
    c.bench_function("crs/score 50 candidate sets", |b| {
        b.iter(|| {
            for (s, ids) in seqs.iter().zip(&ids) {
                black_box(crs.score_candidates(s, ids, None).unwrap());
            }
        })
    });
    c.bench_function("crs/predict 20 understanding", |b| {
        b.iter(|| {
            for i in und.iter().take(20) {
                black_box(crs.predict(i).unwrap());
            }
        })
    });
}

criterion_group!(benches, bench_crs);
criterion_main!(benches);
