//! Executable identity and oracle suites.
//!
//! Every check reports its worst deviation against a tolerance. Tolerances
//! are tiered by error source: algebraic identities at 1e-12, limits and
//! finite differences at 1e-4 relative, bounds at 1e-9.

mod oracle;
mod suites;

pub use oracle::{
    bayes_mean_posterior_oracle, bayes_posterior_oracle, continuous_nelbo_oracle, enumerate_sequences,
    exact_reverse_nll, tanh_sinh, tempered_token_oracle, udlm_integrand_oracle,
};
pub use suites::{
    continuous_limit_curve, fit_log_slope, guided_euler_gap, limits_suite_with, run_suite, taylor_gap_mlp,
    AffineClassifier, Check, GuidedKind, IntegrandFn, LimitCurve, Suite, SuiteReport, TAYLOR_MLP_TV_GAP,
};
