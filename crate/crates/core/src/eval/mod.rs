//! Oracles, verification metrics and the evaluation experiments.

mod experiments;
pub mod metrics;
mod oracles;

pub use experiments::{
    ablation_run, aging_model_eval, evaluate_variant, identity_preservation_eval, identity_scores, max_gap_pairs,
    output_diversity, project_all, verification_gain_eval, write_json, write_roc_csv, AblationReport, AblationVariant, AgingReport, AgingRow,
    IdentityReport, IdentityRow, VariantResult, VerificationReport, VerificationRow, VERIFICATION_FAR,
};
pub use metrics::{auc, compute_eer, roc_curve, spearman, tar_at_far, ScoreSet};
pub use oracles::{
    argmax_rows, embed_all, pairwise_identity_scores, predict_groups, pretrain_oracles, OracleModels, OracleReport,
    AGE_WITHIN_ONE_MIN, IDENTITY_AUC_MIN, ORACLE_REPORT, VERIFIER_MAX_GROUP,
};
