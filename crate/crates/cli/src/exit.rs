use std::fmt;

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

/// Bad invocation or configuration, as opposed to bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps an error chain to a process exit code.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<sylnet::Error>() {
            return match e {
                e if e.is_numeric() => NUMERIC,
                sylnet::Error::Config(_) => USAGE,
                _ => DATA,
            };
        }
    }
    DATA
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_follow_the_root_cause() {
        let numeric = Err::<(), _>(sylnet::Error::NonFinite("loss".into())).context("training");
        assert_eq!(code_for(&numeric.unwrap_err()), NUMERIC);
        let data = anyhow::Error::from(sylnet::Error::DuplicateId("a".into()));
        assert_eq!(code_for(&data), DATA);
        assert_eq!(code_for(&UsageError("x".into()).into()), USAGE);
        assert_eq!(code_for(&anyhow::anyhow!("io")), DATA);
    }
}
