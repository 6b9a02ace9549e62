//! Request authentication: a chain of hooks, every one of which must allow.

use std::sync::Arc;

/// What an authenticator gets to look at.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Credentials {
    /// Token from `Authorization: Bearer …`, if the header was present and well formed.
    pub bearer: Option<String>,
    /// Conversation named in the request body, if any.
    pub conversation_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthDecision {
    Allow,
    Deny(String),
}

pub trait Authenticator: Send + Sync {
    fn authenticate(&self, credentials: &Credentials) -> AuthDecision;
}

impl<F> Authenticator for F
where
    F: Fn(&Credentials) -> AuthDecision + Send + Sync,
{
    fn authenticate(&self, credentials: &Credentials) -> AuthDecision {
        self(credentials)
    }
}

/// Lets every request through.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAuth;

impl Authenticator for NoAuth {
    fn authenticate(&self, _: &Credentials) -> AuthDecision {
        AuthDecision::Allow
    }
}

/// A single shared bearer token.
#[derive(Clone)]
pub struct BearerToken {
    token: String,
}

impl std::fmt::Debug for BearerToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BearerToken").finish_non_exhaustive()
    }
}

impl BearerToken {
    pub fn new(token: impl Into<String>) -> Self {
        Self { token: token.into() }
    }

    /// `None` when the variable is unset or empty.
    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().filter(|t| !t.is_empty()).map(Self::new)
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

impl Authenticator for BearerToken {
    fn authenticate(&self, credentials: &Credentials) -> AuthDecision {
        match &credentials.bearer {
            None => AuthDecision::Deny("missing credentials".into()),
            Some(t) if constant_time_eq(t.as_bytes(), self.token.as_bytes()) => AuthDecision::Allow,
            Some(_) => AuthDecision::Deny("invalid token".into()),
        }
    }
}

/// Ordered hooks; the first denial wins. An empty chain allows everything.
#[derive(Clone, Default)]
pub struct AuthChain {
    hooks: Vec<Arc<dyn Authenticator>>,
}

impl AuthChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, hook: impl Authenticator + 'static) -> Self {
        self.hooks.push(Arc::new(hook));
        self
    }

    /// Bearer auth when `var` holds a token, otherwise open.
    pub fn from_env(var: &str) -> Self {
        match BearerToken::from_env(var) {
            Some(t) => Self::new().with(t),
            None => Self::new().with(NoAuth),
        }
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn authenticate(&self, credentials: &Credentials) -> AuthDecision {
        for hook in &self.hooks {
            if let deny @ AuthDecision::Deny(_) = hook.authenticate(credentials) {
                return deny;
            }
        }
        AuthDecision::Allow
    }
}

/// Extract the token from an `Authorization` header value.
pub fn parse_bearer(header: &str) -> Option<String> {
    let (scheme, token) = header.trim().split_once(' ')?;
    let token = token.trim();
    (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then(|| token.to_string())
}
