//! Preference alignment: mixed-policy pair construction, cached reference
//! log-probabilities, OT-weighted token DPO and a margin Bradley-Terry
//! reward model.

pub mod cache;
pub mod error;
pub mod ot;
pub mod otpo;
pub mod pairs;
pub mod policy;
pub mod reward;

pub use cache::{cache_key, precompute_ref_logprobs, RefLogProbCache, RefModel};
pub use error::{AlignError, Result};
pub use ot::{otpo_weights, sinkhorn, sinkhorn_unbalanced, OtConfig, TokenWeights, TransportPlan};
pub use otpo::{
    mean_token_dpo_loss, otpo_loss, weighted_dpo_loss, OtpoConfig, OtpoStepLog, OtpoTrainer,
    RefSource,
};
pub use pairs::{
    build_preference_pairs, AlignDomain, CandidateSource, PairStats, PolicySampler, PreferencePair,
    PreferenceRecord, Scorer, Source,
};
pub use reward::{
    bt_loss, pairwise_accuracy, rm_train, separable_pairs, Curriculum, RewardModel, RmConfig,
    RmReport,
};
