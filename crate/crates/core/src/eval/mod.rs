//! Region Dice scores, reports and paired significance tests.

mod dice;
mod wilcoxon;

pub use dice::{dice_region, evaluate, DiceReport, Pipeline, RegionMap, Segmenter};
pub use wilcoxon::{average_ranks, wilcoxon_exact, wilcoxon_signed_rank, Wilcoxon, EXACT_MAX_N, MIN_N};
