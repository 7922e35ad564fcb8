//! Data-mixture search with tiny proxy models: sample mixtures over shards,
//! train one proxy per mixture, regress loss on the weights, and pick the
//! mixture with the lowest predicted loss.

pub mod corpus;
pub mod error;
pub mod mixture;
pub mod proxy;
pub mod regress;
pub mod select;

pub use corpus::{build_proxy_corpus, load_shards, synthetic_shards, write_shards, Shard};
pub use error::{MixtureError, Result};
pub use mixture::{apportion, dirichlet_ones, sample_mixtures, MixtureSpec};
pub use proxy::{
    eval_batch, run_proxy, run_proxy_sweep, run_seed, write_sweep_csv, ProxyConfig, ProxyRun,
};
pub use regress::{BoostConfig, Regressor, RegressorKind, Ridge, StumpEnsemble};
pub use select::{
    correlation, fit_regressor, screen_validation_sets, select_from, select_mixture,
    validate_selection, Correlation, FitReport, ScreeningReport, SelectionReport,
};
