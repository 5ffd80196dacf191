//! Cross-fitted estimation of natural direct and indirect effects when an
//! intermediate confounder `Z` is monotone in the treatment `A`.

pub mod crossfit;
pub mod dataset;
pub mod estimator;
pub mod learners;
pub mod oracle;
pub mod sim;
