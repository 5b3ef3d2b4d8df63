//! Model-free evaluation: readability, n-gram overlap and simplicity.

pub mod overlap;
pub mod readability;
pub mod report;

pub use overlap::{bleu, rouge_n, sari, sari_breakdown, BleuMode, SariBreakdown};
pub use readability::{dcrs, fkgl, fres, text_stats, text_stats_with_list, DaleChallList, TextStats};
pub use report::{evaluate_documents, EvalInputs, Metric, MetricReport};
