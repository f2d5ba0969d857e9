//! Library side of the `txloc` command-line tool: configuration, the
//! on-disk dataset format, and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod plot;

use serde_json::json;

/// Machine-readable error category, taken from the first recognizable
/// error in the chain.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<txloc::Error>() {
            return match t {
                txloc::Error::Domain(_) => "domain",
                txloc::Error::Config(_) => "config",
                txloc::Error::Shape { .. } => "shape",
                txloc::Error::EmptyDataset => "empty_dataset",
                txloc::Error::Io(_) => "io",
                txloc::Error::Json(_) => "json",
                txloc::Error::Torch(_) => "torch",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return "parse";
        }
    }
    "runtime"
}

pub fn error_json(e: &anyhow::Error) -> serde_json::Value {
    json!({
        "error": {
            "kind": error_kind(e),
            "message": e.to_string(),
            "chain": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        }
    })
}
