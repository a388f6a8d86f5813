//! Greedy quadrature-driven prototype selection and its scalable variants.

mod core;
mod variants;

pub use self::core::{
    greedy_step, influence_scores, posterior_variance, projection_residual_inf, quadrature_weights,
    rank_descending, select_sbq, InverseState, SelectParams, SelectionConfig, SelectionReport,
    ShardStats,
};
pub use self::variants::{
    select_distributed, select_mp, select_stochastic, SelectionMethod, VariantConfig,
};
