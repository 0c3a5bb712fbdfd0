//! Token allowlist for joining peers.

use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthDecision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allowlist {
    tokens: BTreeSet<String>,
}

impl Allowlist {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    /// One token per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }
}

pub fn authenticate(token: &str, allowlist: &Allowlist) -> AuthDecision {
    if allowlist.contains(token) {
        AuthDecision::Accept
    } else {
        AuthDecision::Reject
    }
}
