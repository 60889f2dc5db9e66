//! Reward fine-tuning of small rectified-flow models with group-relative
//! policy optimization, using a per-sample regression loss as a stand-in for
//! the sample log-likelihood.

pub mod exec;
pub mod flow;
pub mod gradcheck;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod grpo;
pub mod oracle;
pub mod rewards;
pub mod surrogate;
