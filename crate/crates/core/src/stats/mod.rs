//! Run summaries, paired significance tests and mean-rank tables.

mod paired;
mod rank;
mod summary;
mod table;

pub use paired::{paired_t_test, wilcoxon_signed_rank, wilcoxon_with, TestResult, WilcoxonMethod, WILCOXON_EXACT_MAX};
pub use rank::{average_ranks, mean_rank, Direction, RankTable};
pub use summary::{summarize, Summary, CI95_Z};
pub use table::{compare_models, ComparisonReport, ModelComparison, RunRecord, RunTable, TaskDefinition, TaskComparison};
