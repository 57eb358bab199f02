//! Experiment harness: loss comparison, sigma sweeps, tracking traces and
//! density dumps over the synthetic sequences of `probreg`.

pub mod commands;
pub mod config;

pub use config::{RunConfig, UsageError};

/// Process exit code for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.chain().any(|c| c.downcast_ref::<UsageError>().is_some()) {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let e = config::usage("bad flag");
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&e.context("while loading")), 2);
        let numeric = anyhow::Error::from(probreg::Error::Numeric {
            iteration: 3,
            message: "objective is NaN".into(),
        });
        assert_eq!(exit_code(&numeric), 1);
    }
}
