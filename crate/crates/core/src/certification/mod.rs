//! Certified ℓ₂ radii: the DC Lipschitz certificate and randomized smoothing.

mod lipschitz;
mod smoothing;
mod stats;

pub use lipschitz::{certify_lipschitz, dc_radius_supremum, lipschitz_bound_dc, lipschitz_radius, LipschitzCertificate};
pub use smoothing::{
    sample_votes, smoothed_certify, smoothed_predict, BaseClassifier, BayesClassifier, CertificationRecord,
    ConstantClassifier, SmoothedCertificate, SmoothingConfig,
};
pub use stats::{
    binomial_test_two_sided, binomial_upper_tail, clopper_pearson_lower, empirical_bernstein_lower, phi, phi_inverse,
};
