//! Report assembly: checks, ratio tables, stability and rendering.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Result, VerifyError};
use crate::stability::{assess, Stability};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// Worst value of one inequality over every sample it was evaluated on.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub bound: Bound,
    pub limit: f64,
    pub worst: f64,
    pub samples: usize,
    pub failures: usize,
    pub passed: bool,
}

/// Where a ratio was measured.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Labels {
    pub weight: String,
    pub kernel: String,
    pub d: usize,
    pub m: usize,
    pub depth: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioRow {
    pub suite: String,
    pub quantity: String,
    pub weight: String,
    pub kernel: String,
    pub d: usize,
    pub m: usize,
    pub depth: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityRow {
    pub suite: String,
    pub quantity: String,
    pub weight: String,
    pub kernel: String,
    pub m: usize,
    /// Whether the row decides the exit status.
    pub gated: bool,
    #[serde(flatten)]
    pub stability: Stability,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub suite: String,
    pub quantity: String,
    pub rows: usize,
    pub max: f64,
    pub median: f64,
}

/// Stopping-construction ratios of one field over the height grid.
#[derive(Clone, Debug, Serialize)]
pub struct CzRecord {
    pub weight: String,
    pub m: usize,
    pub depth: usize,
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub ratios: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CzReport {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub records: Vec<CzRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantReport {
    /// Normalization of the matrix trace behind every ratio.
    pub trace: &'static str,
    pub config: ExperimentConfig,
    pub suites: Vec<String>,
    pub checks: Vec<Check>,
    pub stability: Vec<StabilityRow>,
    pub summaries: Vec<Summary>,
    pub cz: CzReport,
    pub caveats: Vec<String>,
    pub passed: bool,
    #[serde(skip)]
    pub ratios: Vec<RatioRow>,
}

/// Results of one task, merged into the report in task order.
#[derive(Debug, Default)]
pub struct Sink {
    events: Vec<Event>,
}

#[derive(Debug)]
enum Event {
    Check { suite: &'static str, name: String, bound: Bound, limit: f64, value: f64 },
    Row { row: RatioRow, gated: bool },
    Caveat(String),
    Cz(CzRecord),
}

impl Sink {
    pub fn at_most(&mut self, suite: &'static str, name: impl Into<String>, limit: f64, value: f64) {
        self.events.push(Event::Check { suite, name: name.into(), bound: Bound::AtMost, limit, value });
    }

    pub fn at_least(&mut self, suite: &'static str, name: impl Into<String>, limit: f64, value: f64) {
        self.events.push(Event::Check { suite, name: name.into(), bound: Bound::AtLeast, limit, value });
    }

    /// A check that must hold without exception.
    pub fn require(&mut self, suite: &'static str, name: impl Into<String>, ok: bool) {
        self.at_most(suite, name, 0.0, if ok { 0.0 } else { 1.0 });
    }

    /// A ratio that must be finite and, when `gated`, stable across depths.
    pub fn row(&mut self, suite: &'static str, quantity: &str, at: &Labels, lambda: Option<f64>, value: f64, gated: bool) {
        let row = RatioRow {
            suite: suite.into(),
            quantity: quantity.into(),
            weight: at.weight.clone(),
            kernel: at.kernel.clone(),
            d: at.d,
            m: at.m,
            depth: at.depth,
            seed: at.seed,
            lambda,
            value,
        };
        self.events.push(Event::Row { row, gated });
    }

    pub fn caveat(&mut self, text: impl Into<String>) {
        self.events.push(Event::Caveat(text.into()));
    }

    pub fn cz(&mut self, record: CzRecord) {
        self.events.push(Event::Cz(record));
    }
}

type GroupKey = (String, String, String, String, usize);

#[derive(Default)]
pub struct ReportBuilder {
    checks: BTreeMap<(String, String), Check>,
    rows: Vec<RatioRow>,
    gated: BTreeMap<GroupKey, bool>,
    caveats: Vec<String>,
    cz: Vec<CzRecord>,
}

fn violates(bound: Bound, limit: f64, value: f64) -> bool {
    match bound {
        Bound::AtMost => !(value <= limit),
        Bound::AtLeast => !(value >= limit),
    }
}

impl ReportBuilder {
    pub fn absorb(&mut self, sink: Sink) {
        for event in sink.events {
            match event {
                Event::Check { suite, name, bound, limit, value } => {
                    let entry = self.checks.entry((suite.to_string(), name.clone())).or_insert(Check {
                        suite: suite.into(),
                        name,
                        bound,
                        limit,
                        worst: match bound {
                            Bound::AtMost => f64::NEG_INFINITY,
                            Bound::AtLeast => f64::INFINITY,
                        },
                        samples: 0,
                        failures: 0,
                        passed: true,
                    });
                    entry.samples += 1;
                    if violates(bound, limit, value) {
                        entry.failures += 1;
                        entry.passed = false;
                    }
                    entry.worst = match bound {
                        _ if value.is_nan() || entry.worst.is_nan() => f64::NAN,
                        Bound::AtMost => entry.worst.max(value),
                        Bound::AtLeast => entry.worst.min(value),
                    };
                }
                Event::Row { row, gated } => {
                    let key = (row.suite.clone(), row.quantity.clone(), row.weight.clone(), row.kernel.clone(), row.m);
                    *self.gated.entry(key).or_insert(false) |= gated;
                    self.rows.push(row);
                }
                Event::Caveat(text) => {
                    if !self.caveats.contains(&text) {
                        self.caveats.push(text);
                    }
                }
                Event::Cz(record) => self.cz.push(record),
            }
        }
    }

    pub fn finish(self, config: &ExperimentConfig, suites: Vec<String>) -> Result<ConstantReport> {
        let tol = &config.tolerances;
        let mut stability = Vec::new();
        for (key, &gated) in &self.gated {
            // One sample per (depth, seed): the largest value over the heights.
            let mut per_sample: BTreeMap<(usize, u64), f64> = BTreeMap::new();
            for row in self.rows.iter().filter(|r| {
                (&r.suite, &r.quantity, &r.weight, &r.kernel, r.m) == (&key.0, &key.1, &key.2, &key.3, key.4)
            }) {
                let slot = per_sample.entry((row.depth, row.seed)).or_insert(f64::NEG_INFINITY);
                *slot = if row.value.is_nan() || slot.is_nan() { f64::NAN } else { slot.max(row.value) };
            }
            let samples: Vec<(usize, f64)> = per_sample.iter().map(|(&(j, _), &v)| (j, v)).collect();
            stability.push(StabilityRow {
                suite: key.0.clone(),
                quantity: key.1.clone(),
                weight: key.2.clone(),
                kernel: key.3.clone(),
                m: key.4,
                gated,
                stability: assess(&samples, tol.stability_factor, tol.trend, tol.trend_resolution),
            });
        }
        let mut by_quantity: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            by_quantity.entry((row.suite.clone(), row.quantity.clone())).or_default().push(row.value);
        }
        let summaries = by_quantity
            .into_iter()
            .map(|((suite, quantity), mut values)| {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                let median = if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) };
                Summary { suite, quantity, rows: n, max: values[n - 1], median }
            })
            .collect();
        let checks: Vec<Check> = self.checks.into_values().collect();
        if checks.is_empty() && self.rows.is_empty() {
            return Err(VerifyError::Report("no suite produced any result".into()));
        }
        let passed = checks.iter().all(|c| c.passed)
            && self.rows.iter().all(|r| r.value.is_finite())
            && stability.iter().all(|s| !s.gated || s.stability.stable);
        let mut depths = config.depths.clone();
        depths.sort_unstable();
        Ok(ConstantReport {
            trace: "unnormalized",
            config: config.clone(),
            suites,
            checks,
            stability,
            summaries,
            cz: CzReport { depths, seeds: config.seeds.clone(), records: self.cz },
            caveats: self.caveats,
            passed,
            ratios: self.rows,
        })
    }
}

impl ConstantReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The ratio table, one row per measurement.
    pub fn ratios_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.ratios {
            w.serialize(row).map_err(|e| VerifyError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| VerifyError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| VerifyError::Report(e.to_string()))
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn unstable(&self) -> impl Iterator<Item = &StabilityRow> {
        self.stability.iter().filter(|s| s.gated && !s.stability.stable)
    }

    pub fn check(&self, suite: &str, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.suite == suite && c.name == name)
    }

    pub fn summary(&self, suite: &str, quantity: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.suite == suite && s.quantity == quantity)
    }
}
