//! Configuration, checkpointing and orchestration for the `mpnqs` binary.

pub mod checkpoint;
pub mod config;
pub mod run;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<mpnqs::Error>() {
            return match e {
                mpnqs::Error::Config(_) | mpnqs::Error::InvalidInput(_) => exit::CONFIG,
                mpnqs::Error::Numerical(_) | mpnqs::Error::Singular(_) | mpnqs::Error::Divergence(..) | mpnqs::Error::InvalidState(_) => exit::NUMERICAL,
            };
        }
    }
    exit::FAILURE
}
