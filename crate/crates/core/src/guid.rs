use std::fmt;
use std::str::FromStr;

use rand::Rng;

/// 128-bit worker / processor identifier.
///
/// Simulated runs draw these from a seeded generator so that whole scenarios
/// replay bit-for-bit.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Guid(pub u128);

impl Guid {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Guid(rng.gen())
    }
}

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        write!(
            f,
            "{:08x}-{:08x}-{:08x}-{:08x}",
            (v >> 96) as u32,
            (v >> 64) as u32,
            (v >> 32) as u32,
            v as u32
        )
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed guid: {0:?}")]
pub struct ParseGuidError(String);

impl FromStr for Guid {
    type Err = ParseGuidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 4 || parts.iter().any(|p| p.is_empty() || p.len() > 8) {
            return Err(ParseGuidError(s.to_string()));
        }
        let mut v: u128 = 0;
        for p in parts {
            let word = u32::from_str_radix(p, 16).map_err(|_| ParseGuidError(s.to_string()))?;
            v = (v << 32) | word as u128;
        }
        Ok(Guid(v))
    }
}
