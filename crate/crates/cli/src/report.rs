use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// JSON report. Keys serialize in sorted order at every level.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub config: BTreeMap<String, Value>,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
    pub version: String,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let config = match serde_json::to_value(config).expect("config serializes") {
            Value::Object(map) => map.into_iter().collect(),
            _ => unreachable!("RunConfig is a struct"),
        };
        Self {
            command: command.to_string(),
            config,
            metrics: BTreeMap::new(),
            timestamp: timestamp(),
            version: VERSION.to_string(),
        }
    }

    /// Adds a command-specific setting to the config echo.
    pub fn echo(mut self, key: &str, value: impl Serialize) -> Self {
        self.config.insert(key.to_string(), serde_json::to_value(value).expect("value serializes"));
        self
    }

    pub fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    pub fn to_json(&self) -> String {
        // Round-tripping through Value sorts the struct's own fields too.
        let value = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("report serializes");
        s.push('\n');
        s
    }
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
