//! Control strings embedded in the data stream.
//!
//! Test pipelines recognise magic values such as `ctl:pause:250` or
//! `ctl:crash` and surface them to whoever drives the worker, which then
//! pauses or kills it. This gives integration tests precise control over
//! where in the stream a failure happens.

use std::fmt;

pub const CONTROL_PREFIX: &str = "ctl:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Directive {
    Pause { ms: u64 },
    Crash,
}

impl Directive {
    pub fn parse(s: &str) -> Option<Directive> {
        let rest = s.strip_prefix(CONTROL_PREFIX)?;
        match rest.split(':').collect::<Vec<_>>().as_slice() {
            ["crash"] => Some(Directive::Crash),
            ["pause", ms] => ms.parse().ok().map(|ms| Directive::Pause { ms }),
            _ => None,
        }
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Pause { ms } => write!(f, "{CONTROL_PREFIX}pause:{ms}"),
            Directive::Crash => write!(f, "{CONTROL_PREFIX}crash"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for d in [Directive::Crash, Directive::Pause { ms: 250 }] {
            assert_eq!(Directive::parse(&d.to_string()), Some(d));
        }
        assert_eq!(Directive::parse("ctl:pause:x"), None);
        assert_eq!(Directive::parse("crash"), None);
        assert_eq!(Directive::parse("ctl:explode"), None);
    }
}
