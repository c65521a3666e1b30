use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use counsel_bench::{corpus, random_inputs, random_table, rng};
use counsel_core::corpus::{SegmentationConfig, Segmenter};
use counsel_core::eligibility::classify_structured;
use counsel_core::extraction::{ExtractionResult, PromptVariant};
use counsel_core::grounding::{normalize, verify_verbatim};
use counsel_core::stats::{adjusted_residuals, chi_square};

fn stats(c: &mut Criterion) {
    let mut r = rng(1);
    let tables: Vec<_> = (0..64).map(|_| random_table(&mut r, 7, 2, 2000)).collect();
    c.bench_function("chi_square_7x2", |b| {
        b.iter(|| {
            for t in &tables {
                black_box(chi_square(black_box(t)).unwrap());
            }
        })
    });
    c.bench_function("adjusted_residuals_7x2", |b| b.iter(|| black_box(adjusted_residuals(black_box(&tables[0])).unwrap())));
}

fn grounding(c: &mut Criterion) {
    let corpus = corpus(40, 0);
    let notes: Vec<&str> = corpus.records.iter().map(|r| r.narrative.as_str()).collect();
    c.bench_function("normalize_note", |b| {
        b.iter(|| {
            for n in &notes {
                black_box(normalize(black_box(n)));
            }
        })
    });
    let record = &corpus.records[0];
    let sentence = record.narrative.lines().nth(2).unwrap_or("").to_string();
    let result = ExtractionResult {
        record_id: record.record_id.clone(),
        model_name: "bench".into(),
        prompt_variant: PromptVariant::Short,
        incision_types: Some(vec![sentence.clone(), "incision type not specified".into()]),
        contraindications: Some(vec![sentence]),
        previous_delivery_modes: None,
        raw_response: String::new(),
        retried: false,
    };
    c.bench_function("verify_verbatim", |b| b.iter(|| black_box(verify_verbatim(black_box(&result), &record.narrative))));
}

fn eligibility(c: &mut Criterion) {
    let mut r = rng(2);
    let inputs: Vec<_> = (0..1000).map(|_| random_inputs(&mut r)).collect();
    c.bench_function("classify_structured_1000", |b| {
        b.iter(|| {
            for i in &inputs {
                black_box(classify_structured(black_box(i)));
            }
        })
    });
}

fn segmentation(c: &mut Criterion) {
    let corpus = corpus(20, 20);
    let segmenter = Segmenter::new(&SegmentationConfig::default()).unwrap();
    c.bench_function("segment_40_notes", |b| {
        b.iter(|| {
            for r in &corpus.records {
                black_box(segmenter.segment(black_box(r)));
            }
        })
    });
}

criterion_group!(benches, stats, grounding, eligibility, segmentation);
criterion_main!(benches);
