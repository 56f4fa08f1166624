//! Deterministic scripted backend for offline runs and tests.
//!
//! Replies are looked up by `(role, prompt match rule)` in rule order. A rule
//! either holds a finite queue of replies, consumed one per call, or cycles
//! forever. An exhausted script is an error, never a silent fallback.

use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{estimate_tokens, Backend, CompletionResult, GatewayError, ModelEndpoint, Role};

/// How a rule decides whether it applies to a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptMatcher {
    Any,
    Contains(String),
}

impl PromptMatcher {
    pub fn contains(needle: impl Into<String>) -> Self {
        PromptMatcher::Contains(needle.into())
    }

    fn matches(&self, prompt: &str) -> bool {
        match self {
            PromptMatcher::Any => true,
            PromptMatcher::Contains(needle) => prompt.contains(needle),
        }
    }
}

/// Failure kinds a script can inject, for fault-isolation tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailKind {
    Transport,
    RateLimited,
    ContextOverflow,
    AuthFailure,
}

#[derive(Debug, Clone)]
pub enum ScriptReply {
    Text(String),
    Fail(FailKind),
}

impl<T: Into<String>> From<T> for ScriptReply {
    fn from(s: T) -> Self {
        ScriptReply::Text(s.into())
    }
}

#[derive(Debug)]
struct ScriptRule {
    role: Role,
    matcher: PromptMatcher,
    replies: Vec<ScriptReply>,
    cycle: bool,
    cursor: usize,
}

impl ScriptRule {
    fn available(&self) -> bool {
        self.cycle || self.cursor < self.replies.len()
    }

    fn next_reply(&mut self) -> ScriptReply {
        let reply = self.replies[self.cursor % self.replies.len()].clone();
        self.cursor += 1;
        reply
    }
}

/// One completed scripted exchange, for replay checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub endpoint: String,
    pub role: Role,
    pub prompt: String,
    pub reply: String,
}

/// A fully deterministic backend: identical (script, seed, call sequence)
/// yields an identical transcript.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    seed: u64,
    rules: Mutex<Vec<ScriptRule>>,
    embed_rules: Mutex<Vec<(PromptMatcher, Vec<f64>)>>,
    /// When set, unmatched embedding requests get a seed-keyed pseudo-random
    /// vector of this dimension instead of an error.
    default_embed_dim: Option<usize>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

impl ScriptedBackend {
    pub fn new(seed: u64) -> Self {
        ScriptedBackend {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Add a rule with a finite reply queue, consumed one reply per call.
    pub fn rule<R: Into<ScriptReply>>(
        self,
        role: Role,
        matcher: PromptMatcher,
        replies: impl IntoIterator<Item = R>,
    ) -> Self {
        self.push_rule(role, matcher, replies, false)
    }

    /// Add a rule that cycles through its replies forever.
    pub fn rule_cycle<R: Into<ScriptReply>>(
        self,
        role: Role,
        matcher: PromptMatcher,
        replies: impl IntoIterator<Item = R>,
    ) -> Self {
        self.push_rule(role, matcher, replies, true)
    }

    /// Shorthand for a single endlessly repeated reply.
    pub fn rule_repeat(self, role: Role, matcher: PromptMatcher, reply: impl Into<String>) -> Self {
        self.rule_cycle(role, matcher, [reply.into()])
    }

    fn push_rule<R: Into<ScriptReply>>(
        self,
        role: Role,
        matcher: PromptMatcher,
        replies: impl IntoIterator<Item = R>,
        cycle: bool,
    ) -> Self {
        let replies: Vec<ScriptReply> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "a script rule needs at least one reply");
        self.rules.lock().expect("script lock").push(ScriptRule {
            role,
            matcher,
            replies,
            cycle,
            cursor: 0,
        });
        self
    }

    /// Fixed embedding for texts matching `matcher`.
    pub fn embed_rule(self, matcher: PromptMatcher, vector: Vec<f64>) -> Self {
        self.embed_rules
            .lock()
            .expect("script lock")
            .push((matcher, vector));
        self
    }

    /// Derive embeddings for unmatched texts from a hash of (seed, text).
    pub fn with_default_embeddings(mut self, dim: usize) -> Self {
        self.default_embed_dim = Some(dim);
        self
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("script lock").clone()
    }

    /// The transcript as one line per exchange, for byte comparison.
    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for entry in self.transcript() {
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\n",
                entry.endpoint,
                entry.role,
                entry.prompt.replace('\n', "\\n"),
                entry.reply.replace('\n', "\\n"),
            ));
        }
        out
    }

    fn hashed_embedding(&self, text: &str, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|i| {
                let mut hasher = Sha256::new();
                hasher.update(self.seed.to_le_bytes());
                hasher.update(text.as_bytes());
                hasher.update((i as u64).to_le_bytes());
                let digest = hasher.finalize();
                let mut bytes = [0u8; 8];
                bytes.copy_from_slice(&digest[..8]);
                let unit = u64::from_le_bytes(bytes) as f64 / u64::MAX as f64;
                unit * 2.0 - 1.0
            })
            .collect()
    }
}

fn fail_error(kind: FailKind, endpoint: &str) -> GatewayError {
    match kind {
        FailKind::Transport => GatewayError::Transport {
            endpoint: endpoint.to_string(),
            message: "scripted transport failure".into(),
        },
        FailKind::RateLimited => GatewayError::RateLimited {
            endpoint: endpoint.to_string(),
        },
        FailKind::ContextOverflow => GatewayError::ContextOverflow {
            endpoint: endpoint.to_string(),
        },
        FailKind::AuthFailure => GatewayError::AuthFailure {
            endpoint: endpoint.to_string(),
            message: "scripted auth failure".into(),
        },
    }
}

impl Backend for ScriptedBackend {
    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
    ) -> Result<CompletionResult, GatewayError> {
        let mut rules = self.rules.lock().expect("script lock");
        let rule = rules
            .iter_mut()
            .find(|r| r.role == endpoint.role && r.available() && r.matcher.matches(prompt))
            .ok_or_else(|| GatewayError::ScriptExhausted {
                role: endpoint.role,
                preview: prompt.chars().take(80).collect(),
            })?;
        match rule.next_reply() {
            ScriptReply::Fail(kind) => Err(fail_error(kind, &endpoint.name)),
            ScriptReply::Text(text) => {
                self.transcript.lock().expect("script lock").push(TranscriptEntry {
                    endpoint: endpoint.name.clone(),
                    role: endpoint.role,
                    prompt: prompt.to_string(),
                    reply: text.clone(),
                });
                Ok(CompletionResult {
                    input_tokens: estimate_tokens(prompt),
                    output_tokens: estimate_tokens(&text),
                    text,
                    endpoint_name: endpoint.name.clone(),
                    latency: Duration::ZERO,
                    estimated: true,
                    cached: false,
                })
            }
        }
    }

    fn embed(&self, endpoint: &ModelEndpoint, text: &str) -> Result<Vec<f64>, GatewayError> {
        let rules = self.embed_rules.lock().expect("script lock");
        if let Some((_, vector)) = rules.iter().find(|(m, _)| m.matches(text)) {
            return Ok(vector.clone());
        }
        drop(rules);
        match self.default_embed_dim {
            Some(dim) => Ok(self.hashed_embedding(text, dim)),
            None => Err(GatewayError::ScriptExhausted {
                role: endpoint.role,
                preview: text.chars().take(80).collect(),
            }),
        }
    }
}

/// In-memory lookup table standing in for a live toxicity scorer.
#[derive(Debug, Default)]
pub struct ScriptedScores {
    rules: Vec<(PromptMatcher, f64)>,
    default: Option<f64>,
    fail: Option<FailKind>,
}

impl ScriptedScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, matcher: PromptMatcher, score: f64) -> Self {
        self.rules.push((matcher, score));
        self
    }

    pub fn with_default(mut self, score: f64) -> Self {
        self.default = Some(score);
        self
    }

    pub fn failing(mut self, kind: FailKind) -> Self {
        self.fail = Some(kind);
        self
    }

    pub fn lookup(&self, text: &str) -> Result<f64, GatewayError> {
        if let Some(kind) = self.fail {
            return Err(fail_error(kind, "toxicity-scorer"));
        }
        self.rules
            .iter()
            .find(|(m, _)| m.matches(text))
            .map(|(_, s)| *s)
            .or(self.default)
            .ok_or_else(|| GatewayError::ScriptExhausted {
                role: Role::Judge,
                preview: text.chars().take(80).collect(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ModelEndpoint;

    fn endpoint(role: Role) -> ModelEndpoint {
        ModelEndpoint::new(format!("{role:?}").to_lowercase(), role)
    }

    #[test]
    fn matching_rule_returns_scripted_reply_with_estimated_tokens() {
        let backend = ScriptedBackend::new(0).rule_repeat(
            Role::Expert,
            PromptMatcher::contains("feedback"),
            "[80] [reason] solid",
        );
        let r = backend
            .complete(&endpoint(Role::Expert), "please give feedback on this")
            .unwrap();
        assert_eq!(r.text, "[80] [reason] solid");
        assert!(r.estimated);
        assert_eq!(r.input_tokens, estimate_tokens("please give feedback on this"));
    }

    #[test]
    fn exhausted_script_is_an_error() {
        let backend =
            ScriptedBackend::new(0).rule(Role::Expert, PromptMatcher::Any, ["only once"]);
        let ep = endpoint(Role::Expert);
        backend.complete(&ep, "a").unwrap();
        let err = backend.complete(&ep, "b").unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { .. }));
    }

    #[test]
    fn rules_are_checked_in_order() {
        let backend = ScriptedBackend::new(0)
            .rule_repeat(Role::Expert, PromptMatcher::contains("special"), "first")
            .rule_repeat(Role::Expert, PromptMatcher::Any, "fallback");
        let ep = endpoint(Role::Expert);
        assert_eq!(backend.complete(&ep, "a special case").unwrap().text, "first");
        assert_eq!(backend.complete(&ep, "anything").unwrap().text, "fallback");
    }

    #[test]
    fn roles_do_not_cross() {
        let backend = ScriptedBackend::new(0)
            .rule_repeat(Role::Expert, PromptMatcher::Any, "from expert")
            .rule_repeat(Role::Amateur, PromptMatcher::Any, "from amateur");
        assert_eq!(
            backend.complete(&endpoint(Role::Amateur), "x").unwrap().text,
            "from amateur"
        );
        assert_eq!(
            backend.complete(&endpoint(Role::Expert), "x").unwrap().text,
            "from expert"
        );
    }

    #[test]
    fn injected_failure_maps_to_gateway_error() {
        let backend = ScriptedBackend::new(0).rule(
            Role::Expert,
            PromptMatcher::Any,
            [ScriptReply::Fail(FailKind::Transport), "recovered".into()],
        );
        let ep = endpoint(Role::Expert);
        assert!(matches!(
            backend.complete(&ep, "x").unwrap_err(),
            GatewayError::Transport { .. }
        ));
        assert_eq!(backend.complete(&ep, "x").unwrap().text, "recovered");
    }

    #[test]
    fn replay_produces_identical_transcripts() {
        let build = || {
            ScriptedBackend::new(7)
                .rule(Role::Expert, PromptMatcher::Any, ["one", "two"])
                .rule_repeat(Role::Amateur, PromptMatcher::Any, "echo")
        };
        let run = |backend: &ScriptedBackend| {
            backend.complete(&endpoint(Role::Expert), "p1").unwrap();
            backend.complete(&endpoint(Role::Amateur), "p2").unwrap();
            backend.complete(&endpoint(Role::Expert), "p3").unwrap();
            backend.transcript_text()
        };
        let a = build();
        let b = build();
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn embed_rules_return_fixed_vectors() {
        let backend = ScriptedBackend::new(0)
            .embed_rule(PromptMatcher::contains("alpha"), vec![1.0, 0.0])
            .embed_rule(PromptMatcher::Any, vec![0.0, 1.0]);
        let ep = endpoint(Role::Embedder);
        assert_eq!(backend.embed(&ep, "alpha text").unwrap(), vec![1.0, 0.0]);
        assert_eq!(backend.embed(&ep, "other").unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn default_embeddings_are_deterministic_per_text() {
        let backend = ScriptedBackend::new(3).with_default_embeddings(8);
        let ep = endpoint(Role::Embedder);
        let a = backend.embed(&ep, "same text").unwrap();
        let b = backend.embed(&ep, "same text").unwrap();
        let c = backend.embed(&ep, "different").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 8);
    }
}
