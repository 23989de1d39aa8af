//! Evaluation suite: a trainable contrastive text–motion evaluator, the
//! retrieval/distributional metrics computed in its embedding space, caption
//! metrics, a procedural class oracle, and report emitters.

pub mod evaluator;
pub mod metrics;
pub mod nlg;
pub mod oracle;
pub mod pipeline;
pub mod report;

pub use evaluator::{train_evaluator, EvaluatorEmbedder, EvaluatorReport};
pub use metrics::{diversity, fid, jacobi_eigh, multimodality, r_precision, RetrievalReport};
pub use nlg::{bleu, rouge_l};
pub use oracle::{class_accuracy, classify_motion, OracleFit};
pub use pipeline::{
    caption_matches_class, cfg_fid_sweep, eval_m2t, eval_references, eval_t2m, generate_caption,
    generate_motion_clip, generate_motion_latent, generate_prediction, M2tEval, T2mEval,
};
pub use report::{mean_ci95, write_metrics_csv, write_svg_chart, MetricRow, Series};
