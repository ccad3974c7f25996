//! Deterministic triplet-to-sentence conversion for NLI hypotheses.
//!
//! Rules, applied in order: predicate rewrite, camelCase token splitting,
//! `<none>` dropped, nested objects rendered recursively behind a connector.
//! Output is lowercase except for the first character.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::triplet::{Term, Triplet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid verbalizer config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("connector for {predicate:?} must be a single lowercase word, got {connector:?}")]
    BadConnector { predicate: String, connector: String },
}

/// Rewrite and connector tables.
///
/// The shipped same-subject connector list only holds `want -> to`; extend it
/// through a config file when other predicates should drop the inner subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerbalizerConfig {
    pub predicate_rewrites: BTreeMap<String, String>,
    pub same_subject_connectors: BTreeMap<String, String>,
    pub default_connector: String,
}

impl Default for VerbalizerConfig {
    fn default() -> Self {
        VerbalizerConfig {
            predicate_rewrites: BTreeMap::from([("hasAttribute".into(), "has".into())]),
            same_subject_connectors: BTreeMap::from([("want".into(), "to".into())]),
            default_connector: "that".into(),
        }
    }
}

impl VerbalizerConfig {
    /// Loads a TOML key-value file. Missing tables fall back to the defaults:
    ///
    /// ```toml
    /// default_connector = "that"
    /// [predicate_rewrites]
    /// hasAttribute = "has"
    /// [same_subject_connectors]
    /// want = "to"
    /// stop = "when"
    /// ```
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: VerbalizerConfig = toml::from_str(text)?;
        let default_key = "<default>".to_string();
        let connectors = cfg
            .same_subject_connectors
            .iter()
            .chain(std::iter::once((&default_key, &cfg.default_connector)));
        for (predicate, connector) in connectors {
            let ok = !connector.is_empty() && connector.chars().all(|c| c.is_lowercase());
            if !ok {
                return Err(ConfigError::BadConnector {
                    predicate: predicate.clone(),
                    connector: connector.clone(),
                });
            }
        }
        Ok(cfg)
    }
}

/// Splits camelCase identifiers into lowercase space-separated tokens.
///
/// `strangeLooks` becomes `strange looks`; existing spaces are kept single.
pub fn split_tokens(identifier: &str) -> String {
    let chars: Vec<char> = identifier.chars().collect();
    let mut out = String::with_capacity(identifier.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c.is_uppercase() && i > 0 {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            // aB -> a b, ABc -> a bc
            if prev.is_lowercase() || prev.is_numeric() || (prev.is_uppercase() && next_lower) {
                out.push(' ');
            }
        }
        out.extend(c.to_lowercase());
    }
    collapse_ws(&out)
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn verbalize(t: &Triplet, config: &VerbalizerConfig) -> String {
    let body = collapse_ws(&clause(t, config, true));
    capitalize(&body)
}

fn predicate(relation: &str, config: &VerbalizerConfig) -> String {
    match config.predicate_rewrites.get(relation) {
        Some(rewritten) => rewritten.clone(),
        None => split_tokens(relation),
    }
}

fn clause(t: &Triplet, config: &VerbalizerConfig, with_subject: bool) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(5);
    if with_subject {
        parts.push(split_tokens(&t.subject));
    }
    parts.push(predicate(&t.relation, config));
    match &t.object {
        Term::Entity(name) => parts.push(split_tokens(name)),
        Term::None => {}
        Term::Nested(inner) => match config.same_subject_connectors.get(&t.relation) {
            Some(connector) if inner.subject == t.subject => {
                parts.push(connector.clone());
                parts.push(clause(inner, config, false));
            }
            _ => {
                parts.push(config.default_connector.clone());
                parts.push(clause(inner, config, true));
            }
        },
    }
    parts.join(" ")
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
