//! Configuration, commands and report formatting behind the `fineprune`
//! binary.

pub mod config;
pub mod report;
pub mod run;

pub use config::RunConfig;

/// Process exit code for an error of the given category.
pub fn exit_code(category: fineprune::ErrorCategory) -> u8 {
    use fineprune::ErrorCategory::*;
    match category {
        Config => 2,
        Data => 3,
        Numeric => 4,
        Internal => 1,
    }
}
