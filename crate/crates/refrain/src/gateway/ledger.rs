//! Per-endpoint token and call accounting.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::CompletionResult;

/// Tallies for one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointUsage {
    /// Live completions (cache hits are counted separately).
    pub calls: u64,
    /// Cache hits, recorded as zero-cost.
    pub cached_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// True if any counted tokens came from the local estimator rather than
    /// provider usage fields.
    pub estimated: bool,
}

/// Grand totals across endpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub cached_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// An immutable copy of the ledger, ordered by endpoint name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub endpoints: BTreeMap<String, EndpointUsage>,
}

impl LedgerSnapshot {
    pub fn totals(&self) -> UsageTotals {
        let mut t = UsageTotals::default();
        for usage in self.endpoints.values() {
            t.calls += usage.calls;
            t.cached_calls += usage.cached_calls;
            t.input_tokens += usage.input_tokens;
            t.output_tokens += usage.output_tokens;
        }
        t
    }
}

/// Thread-safe accumulator of per-endpoint usage. Recording is atomic, so
/// concurrent pipelines may share one ledger.
#[derive(Debug, Default)]
pub struct UsageLedger {
    rows: Mutex<BTreeMap<String, EndpointUsage>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, result: &CompletionResult) {
        let mut rows = self.rows.lock().expect("ledger lock");
        let row = rows.entry(result.endpoint_name.clone()).or_default();
        if result.cached {
            row.cached_calls += 1;
        } else {
            row.calls += 1;
            row.input_tokens += result.input_tokens;
            row.output_tokens += result.output_tokens;
            row.estimated |= result.estimated;
        }
    }

    /// Fold another ledger's snapshot into this one (used to roll per-case
    /// slices up into the run total).
    pub fn merge(&self, other: &LedgerSnapshot) {
        let mut rows = self.rows.lock().expect("ledger lock");
        for (name, usage) in &other.endpoints {
            let row = rows.entry(name.clone()).or_default();
            row.calls += usage.calls;
            row.cached_calls += usage.cached_calls;
            row.input_tokens += usage.input_tokens;
            row.output_tokens += usage.output_tokens;
            row.estimated |= usage.estimated;
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            endpoints: self.rows.lock().expect("ledger lock").clone(),
        }
    }

    /// Number of live completion calls across all endpoints.
    pub fn completion_calls(&self) -> u64 {
        self.snapshot().totals().calls
    }
}
