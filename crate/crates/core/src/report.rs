//! Estimator time series, convergence detection and rare-rate windows.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,episode,estimate,rare_rate,wallclock_ms";

/// Default trailing window (episodes) for the sampled rare-event rate.
pub const DEFAULT_RARE_WINDOW: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub episode: u64,
    pub estimate: f64,
    pub rare_rate: f64,
    pub wallclock_ms: f64,
}

/// Declares convergence at the first step where the spread (max - min) of
/// the estimate over the trailing `window` steps drops below
/// `tolerance * current estimate`. Latches once declared.
#[derive(Clone, Debug)]
pub struct ConvergenceDetector {
    window: usize,
    tolerance: f64,
    seen: u64,
    // monotone deques of (index, value)
    maxq: VecDeque<(u64, f64)>,
    minq: VecDeque<(u64, f64)>,
    converged_at: Option<u64>,
}

impl ConvergenceDetector {
    pub fn new(window: usize, tolerance: f64) -> Self {
        assert!(window >= 1, "window must be positive");
        ConvergenceDetector {
            window,
            tolerance,
            seen: 0,
            maxq: VecDeque::new(),
            minq: VecDeque::new(),
            converged_at: None,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Feeds the estimate after `step`; returns the convergence step once
    /// declared.
    pub fn observe(&mut self, step: u64, estimate: f64) -> Option<u64> {
        let i = self.seen;
        self.seen += 1;
        while self.maxq.back().is_some_and(|(_, v)| *v <= estimate) {
            self.maxq.pop_back();
        }
        self.maxq.push_back((i, estimate));
        while self.minq.back().is_some_and(|(_, v)| *v >= estimate) {
            self.minq.pop_back();
        }
        self.minq.push_back((i, estimate));
        let w = self.window as u64;
        while self.maxq.front().is_some_and(|(j, _)| *j + w <= i) {
            self.maxq.pop_front();
        }
        while self.minq.front().is_some_and(|(j, _)| *j + w <= i) {
            self.minq.pop_front();
        }
        if self.converged_at.is_none() && self.seen >= w {
            let spread = self.maxq.front().map_or(0.0, |x| x.1) - self.minq.front().map_or(0.0, |x| x.1);
            if spread < self.tolerance * estimate {
                self.converged_at = Some(step);
            }
        }
        self.converged_at
    }

    pub fn converged_at(&self) -> Option<u64> {
        self.converged_at
    }
}

/// Fraction of rare outcomes among the trailing `capacity` episodes.
#[derive(Clone, Debug)]
pub struct RareRateWindow {
    capacity: usize,
    outcomes: VecDeque<bool>,
    rare: usize,
}

impl RareRateWindow {
    pub fn new(capacity: usize) -> Self {
        RareRateWindow {
            capacity: capacity.max(1),
            outcomes: VecDeque::new(),
            rare: 0,
        }
    }

    pub fn push(&mut self, rare: bool) {
        if self.outcomes.len() == self.capacity {
            if self.outcomes.pop_front() == Some(true) {
                self.rare -= 1;
            }
        }
        self.outcomes.push_back(rare);
        if rare {
            self.rare += 1;
        }
    }

    pub fn rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.rare as f64 / self.outcomes.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.outcomes.len() == self.capacity
    }
}

/// Time series and metadata of one estimator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub convergence_step: Option<u64>,
    /// Episodes completed when convergence was declared.
    pub convergence_episode: Option<u64>,
    pub final_estimate: f64,
    pub transitions: u64,
    pub episodes: u64,
    pub final_rare_rate: f64,
    pub skipped_updates: u64,
    /// Method-specific extras (weight bounds, secondary estimates, flags).
    pub diagnostics: BTreeMap<String, f64>,
}

/// JSON summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub final_estimate: f64,
    pub convergence_step: Option<u64>,
    /// Transitions until convergence, or all transitions if it never converged.
    pub transitions: u64,
    /// Episodes until convergence, or all episodes if it never converged.
    pub episodes: u64,
    pub final_rare_rate: f64,
}

impl EstimatorReport {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.method.clone(),
            env: self.env.clone(),
            seed: self.seed,
            final_estimate: self.final_estimate,
            convergence_step: self.convergence_step,
            transitions: self.convergence_step.unwrap_or(self.transitions),
            episodes: self.convergence_episode.unwrap_or(self.episodes),
            final_rare_rate: self.final_rare_rate,
        }
    }

    /// CSV text; `with_wallclock = false` blanks the wall-clock column so
    /// identical seeds give identical text.
    pub fn to_csv(&self, with_wallclock: bool) -> String {
        let mut out = String::with_capacity(32 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            use std::fmt::Write as _;
            let wc = if with_wallclock {
                format!("{:.3}", r.wallclock_ms)
            } else {
                String::new()
            };
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.episode, r.estimate, r.rare_rate, wc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv(true).as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parses rows written by [`EstimatorReport::to_csv`]. A blank wall-clock
/// column reads as 0.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::config("csv", e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != CSV_HEADER {
        return Err(Error::config("csv.header", format!("unexpected header `{headers}`")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(format!("csv.row[{i}]"), e.to_string()))?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            let f = field(j);
            if f.is_empty() {
                return Ok(0.0);
            }
            f.parse::<f64>()
                .map_err(|e| Error::config(format!("csv.row[{i}][{j}]"), e.to_string()))
        };
        let int = |j: usize| -> Result<u64> {
            field(j)
                .parse::<u64>()
                .map_err(|e| Error::config(format!("csv.row[{i}][{j}]"), e.to_string()))
        };
        rows.push(ReportRow {
            step: int(0)?,
            episode: int(1)?,
            estimate: num(2)?,
            rare_rate: num(3)?,
            wallclock_ms: num(4)?,
        });
    }
    Ok(rows)
}

/// Accumulates rows while a run streams its estimate, tracking episodes
/// and the windowed rare-event rate.
#[derive(Debug)]
pub struct ReportSink {
    method: String,
    env: String,
    seed: u64,
    rows: Vec<ReportRow>,
    detector: ConvergenceDetector,
    rare: RareRateWindow,
    episodes: u64,
    convergence_episode: Option<u64>,
    started: Instant,
    initial_estimate: f64,
    skipped: u64,
    diagnostics: BTreeMap<String, f64>,
}

impl ReportSink {
    pub fn new(method: &str, env: &str, seed: u64, detector: ConvergenceDetector) -> Self {
        ReportSink {
            method: method.to_string(),
            env: env.to_string(),
            seed,
            rows: Vec::new(),
            detector,
            rare: RareRateWindow::new(DEFAULT_RARE_WINDOW),
            episodes: 0,
            convergence_episode: None,
            started: Instant::now(),
            initial_estimate: 0.0,
            skipped: 0,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_rare_window(mut self, episodes: usize) -> Self {
        self.rare = RareRateWindow::new(episodes);
        self
    }

    pub fn set_initial_estimate(&mut self, v: f64) {
        self.initial_estimate = v;
    }

    pub fn end_episode(&mut self, rare: bool) {
        self.episodes += 1;
        self.rare.push(rare);
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn rare_rate(&self) -> f64 {
        self.rare.rate()
    }

    pub fn converged(&self) -> bool {
        self.detector.converged_at().is_some()
    }

    /// Appends the row for `step` (transitions so far, strictly increasing).
    pub fn record(&mut self, step: u64, estimate: f64) {
        debug_assert!(self.rows.last().is_none_or(|r| r.step < step));
        let before = self.detector.converged_at();
        let after = self.detector.observe(step, estimate);
        if before.is_none() && after.is_some() {
            self.convergence_episode = Some(self.episodes);
        }
        self.rows.push(ReportRow {
            step,
            episode: self.episodes,
            estimate,
            rare_rate: self.rare.rate(),
            wallclock_ms: self.started.elapsed().as_secs_f64() * 1e3,
        });
    }

    pub fn skip_update(&mut self) {
        self.skipped += 1;
    }

    pub fn diagnostic(&mut self, key: &str, value: f64) {
        self.diagnostics.insert(key.to_string(), value);
    }

    pub fn finish(self) -> EstimatorReport {
        let last = self.rows.last().copied();
        EstimatorReport {
            method: self.method,
            env: self.env,
            seed: self.seed,
            convergence_step: self.detector.converged_at(),
            convergence_episode: self.convergence_episode,
            final_estimate: last.map_or(self.initial_estimate, |r| r.estimate),
            transitions: last.map_or(0, |r| r.step),
            episodes: self.episodes,
            final_rare_rate: self.rare.rate(),
            skipped_updates: self.skipped,
            diagnostics: self.diagnostics,
            rows: self.rows,
        }
    }
}
