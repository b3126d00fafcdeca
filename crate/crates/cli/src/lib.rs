//! Config loading and command implementations behind the `ovit` binary.

pub mod commands;
pub mod config;

pub use config::{Invalid, Overrides, RunConfig};

/// 1 for bad configuration or arguments, 2 for failures during a run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some()
            || e.downcast_ref::<ovit_core::Error>()
                .is_some_and(ovit_core::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}
