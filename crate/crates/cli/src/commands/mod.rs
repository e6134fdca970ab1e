//! One module per subcommand; each owns its flag struct, its config
//! struct, and a `run` entry point.

pub mod adjoint_sim;
pub mod fisher_check;
pub mod gen_data;
pub mod nll;
pub mod ot_test;
pub mod trace_bench;
pub mod train;
