//! WebAssembly bindings for the static demo page. Every export takes and
//! returns plain strings; results are JSON objects with an `error` field on
//! failure.

use iie_core::eval::{binomial_one_sided, cohen_kappa, PolarityConsensus, Tail};
use iie_core::triplet::{lint_triplet, parse_triplet, parse_triplet_list, Canonical, LintFinding, Triplet};
use iie_core::verbalizer::{verbalize, VerbalizerConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Serialize)]
struct ParsedTriplet {
    canonical: String,
    depth: usize,
    hypothesis: String,
    lints: Vec<LintFinding>,
}

fn describe(t: &Triplet, cfg: &VerbalizerConfig) -> ParsedTriplet {
    ParsedTriplet {
        canonical: t.canonical(),
        depth: t.depth(),
        hypothesis: verbalize(t, cfg),
        lints: lint_triplet(t, &[]),
    }
}

fn error(message: impl std::fmt::Display) -> String {
    json!({ "error": message.to_string() }).to_string()
}

/// Parses one triplet or a bracketed `Triplets: [...]` list and returns the
/// canonical form of each item with its hypothesis sentence and lints.
#[wasm_bindgen]
pub fn parse_render(text: &str) -> String {
    let cfg = VerbalizerConfig::default();
    let text = text.trim();
    let body = text.strip_prefix("Triplets:").map(str::trim).unwrap_or(text);
    let result = if body.starts_with('[') {
        parse_triplet_list(body).map(|list| {
            let items: Vec<ParsedTriplet> = list.triplets().map(|t| describe(t, &cfg)).collect();
            json!({ "canonical": list.canonical(), "triplets": items })
        })
    } else {
        parse_triplet(body).map(|t| json!({ "canonical": t.canonical(), "triplets": [describe(&t, &cfg)] }))
    };
    match result {
        Ok(v) => v.to_string(),
        Err(e) => error(e),
    }
}

/// Verbalizes one triplet per line. `config_toml` may be empty for the
/// default rules.
#[wasm_bindgen]
pub fn verbalize_lines(text: &str, config_toml: &str) -> String {
    let cfg = if config_toml.trim().is_empty() {
        VerbalizerConfig::default()
    } else {
        match VerbalizerConfig::from_toml(config_toml) {
            Ok(c) => c,
            Err(e) => return error(e),
        }
    };
    let lines: Vec<_> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| match parse_triplet(l) {
            Ok(t) => json!({ "input": l, "output": verbalize(&t, &cfg) }),
            Err(e) => json!({ "input": l, "error": e.to_string() }),
        })
        .collect();
    json!({ "lines": lines }).to_string()
}

#[derive(Deserialize)]
struct MetricsInput {
    /// Square contingency table, rows and columns in the same label order.
    #[serde(default)]
    matrix: Option<Vec<Vec<f64>>>,
    /// Proportions of fully-agree and disagree answers.
    #[serde(default)]
    polarity: Option<(f64, f64)>,
    /// (successes, trials, null probability), tested in the lower tail.
    #[serde(default)]
    binomial: Option<(u64, u64, f64)>,
}

/// Agreement metrics over a JSON request with any of `matrix`, `polarity`
/// and `binomial`.
#[wasm_bindgen]
pub fn metrics(request: &str) -> String {
    let input: MetricsInput = match serde_json::from_str(request) {
        Ok(i) => i,
        Err(e) => return error(e),
    };
    let mut out = serde_json::Map::new();
    if let Some(m) = input.matrix {
        out.insert(
            "kappa".into(),
            match cohen_kappa(&m) {
                Ok(k) => json!(k),
                Err(e) => json!({ "error": e.to_string() }),
            },
        );
    }
    if let Some((fully, disagree)) = input.polarity {
        let p = PolarityConsensus::from_proportions(fully, disagree);
        out.insert(
            "polarity".into(),
            json!({ "raw_mean": p.raw_mean, "normalized": p.normalized, "concur": p.concur }),
        );
    }
    if let Some((k, n, p)) = input.binomial {
        out.insert(
            "binomial_lower_p".into(),
            match binomial_one_sided(k, n, p, Tail::Lower) {
                Ok(v) => json!(v),
                Err(e) => json!({ "error": e.to_string() }),
            },
        );
    }
    serde_json::Value::Object(out).to_string()
}
