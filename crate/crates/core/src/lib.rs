// Validation writes `!(x >= 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffkit;
pub mod function_spaces;
pub mod operator_net;
pub mod pde_suite;
pub mod reference_solvers;
pub mod adversarial;
pub mod training;
pub mod eval_report;
pub mod cli;
