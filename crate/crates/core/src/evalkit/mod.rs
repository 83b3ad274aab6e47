//! Relevance verification, generation metrics and merge ablations.

mod bench;
mod harness;
mod metrics;
mod noise;
mod report;

pub use bench::{
    bench_from_manifest, bench_item, build_bench, evaluate_variant, generate, mean_pair_overlap,
    run_merge_ablation, BenchInit, BenchItem, EvalConfig, GenerateOptions, Generation, Variant,
};
pub use harness::{
    relevance_score_harness, HarnessResult, RelevanceExperimentConfig, MIN_DENOMINATOR,
};
pub use metrics::{
    attention_overlap, bbox_delta, image_match_score, paired_bootstrap, text_match_score,
    BootstrapInterval,
};
pub use noise::{inject_noise, NoiseStrategy};
pub use report::{
    markdown_tables, render_report, svg_bars, Aggregate, EvalReport, EvalRow, METRICS,
};
