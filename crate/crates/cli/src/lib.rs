//! Command-line entry points and the prediction service.

pub mod commands;
pub mod service;

use serde_json::{json, Value};

/// Machine-readable form of a failure, written to stderr.
pub fn error_json(err: &anyhow::Error) -> Value {
    use sparsetraj::Error as E;
    let kind = if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) {
        match e {
            E::Checkpoint { .. } => "checkpoint",
            E::Spec(_) | E::Scene(_) | E::Shape(_) => "spec",
            E::Config(_) | E::Toml(_) | E::InvalidOrder(_) => "config",
            E::Parse { .. } | E::Frame { .. } | E::Dataset(_) | E::Window(_) => "data",
            E::Io(_) => "io",
            _ => "runtime",
        }
    } else if err.chain().any(|c| c.is::<std::io::Error>()) {
        "io"
    } else if err.chain().any(|c| c.is::<serde_json::Error>() || c.is::<toml::de::Error>()) {
        "parse"
    } else {
        "runtime"
    };
    let message = err.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    json!({ "error": { "kind": kind, "message": message } })
}
