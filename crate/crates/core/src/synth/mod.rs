//! Synthetic speaker/phoneme corpus with oracle metrics and the ablation harness.

mod ablation;
mod corpus;
mod metrics;
mod projection;

pub use ablation::{
    ablation_rows, evaluate_counts, hallucinate_raw, run_ablation_suite, training_data, variant_label,
    write_ablation_csv, AblationRow, CountMetrics, EvalProtocol, EvalSplit, VariantResult,
};
pub use corpus::{
    gen_corpus, nearest_center, PhonemeCodebook, SynthConfig, SyntheticCorpus, SyntheticSpeaker, Utterance,
};
pub use metrics::{content_error, coverage, coverage_radius, fidelity, fidelity_metric, nearest_rows, BenchMetrics};
pub use projection::{export_projection, Pca};
