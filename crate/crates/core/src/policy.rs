//! Read schedules for simultaneous decoding: the fixed wait-k policy
//! and the full-sentence policy.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Read k tokens, then alternate one read per write.
    WaitK(usize),
    /// The whole source is available before the first write.
    Full,
}

impl Policy {
    pub fn new_wait_k(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Contract("wait-k requires k >= 1".into()));
        }
        Ok(Policy::WaitK(k))
    }

    /// Source prefix length available when emitting target token t
    /// (1-based): min(k + t − 1, n) for wait-k, n for full-sentence.
    pub fn g(&self, t: usize, n: usize) -> Result<usize> {
        if t < 1 || n < 1 {
            return Err(Error::Contract(format!("g requires t,n >= 1, got t={t} n={n}")));
        }
        Ok(match self {
            Policy::WaitK(k) => (k + t - 1).min(n),
            Policy::Full => n,
        })
    }

    /// First decoding step at which the full source has been read.
    pub fn tau_g(&self, n: usize) -> Result<usize> {
        if n < 1 {
            return Err(Error::Contract("tau_g requires n >= 1".into()));
        }
        Ok(match self {
            Policy::WaitK(k) => {
                if *k >= n {
                    1
                } else {
                    n - k + 1
                }
            }
            Policy::Full => 1,
        })
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::WaitK(k) => write!(f, "wait-{k}"),
            Policy::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Policy::Full);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::Format(format!("policy must be a positive integer or 'full', got {s:?}")))?;
        Policy::new_wait_k(k)
    }
}
