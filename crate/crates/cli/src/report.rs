//! Machine-readable report documents and their human-readable tables.

use std::fmt::Write as _;
use std::path::Path;

use accel_ode::accel::{EstimateReport, Method};
use accel_ode::mc::{McSummary, ScenarioSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Fit {
        report: EstimateReport,
        /// observation times were divided by this before fitting
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time_scale: Option<f64>,
    },
    Mc {
        spec: ScenarioSpec,
        summary: McSummary,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: Body,
}

impl Document {
    pub fn new(body: Body) -> Self {
        Self { schema_version: SCHEMA_VERSION, body }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parses a document, refusing any schema version other than the
    /// current one.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let err = |m: String| CliError::parse("report parsing", m);
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        match value.get("schema_version") {
            None => return Err(err("missing schema_version".into())),
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION as u64) => {
                return Err(err(format!("unsupported schema_version {v} (this build reads {SCHEMA_VERSION})")))
            }
            _ => {}
        }
        serde_json::from_value(value).map_err(|e| err(e.to_string()))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::parse("report parsing", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn render(&self) -> String {
        match &self.body {
            Body::Fit { report, time_scale } => fit_table(report, *time_scale),
            Body::Mc { summary, .. } => mc_table(summary),
        }
    }
}

/// Four significant digits; e-notation outside `[1e-3, 1e4)`.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let a = x.abs();
    if a == 0.0 {
        "0".into()
    } else if (1e-3..1e4).contains(&a) {
        let decimals = (3 - a.log10().floor() as i32).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.3e}")
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> =
        (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap()).collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Accel => "ACCEL",
        Method::Nls => "NLS",
    }
}

pub fn fit_table(r: &EstimateReport, time_scale: Option<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model {}  method {}  n = {}  level {}", r.model, method_name(r.method), r.n, r.level);
    let bw = r.selected_bandwidth.map(sig4).unwrap_or_else(|| "-".into());
    let _ = writeln!(out, "bandwidth {bw}  sigma^2 {}  RSS {}", sig4(r.sigma2_hat), sig4(r.rss));
    if let Some(s) = time_scale {
        let _ = writeln!(out, "times divided by {} before fitting", sig4(s));
    }
    let header: Vec<String> = ["Parameter", "Prelim", "Point", "CI(L)", "CI(R)"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = r
        .intervals
        .iter()
        .map(|iv| vec![iv.label.clone(), sig4(r.eta_prelim.get(iv.index)), sig4(iv.point), sig4(iv.lower), sig4(iv.upper)])
        .collect();
    out.push_str(&table(&header, &rows));
    let d = &r.diagnostics;
    if let Some(c) = d.jacobian_condition {
        let _ = writeln!(out, "Newton Jacobian condition {}", sig4(c));
    }
    if let Some(c) = d.fisher_condition {
        let _ = writeln!(out, "Fisher condition {}", sig4(c));
    }
    if let (Some(it), Some(conv)) = (d.nls_iterations, d.nls_converged) {
        let _ = writeln!(out, "NLS iterations {it} ({})", if conv { "converged" } else { "not converged" });
    }
    if d.finite_difference_derivatives {
        out.push_str("derivatives by finite differences\n");
    }
    for w in &d.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

pub fn mc_table(s: &McSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario {}  model {}  R = {}  level {}", s.scenario, s.model, s.replications, s.level);
    let labels: Vec<String> = s.estimators.first().map(|e| e.parameters.iter().map(|p| p.label.clone()).collect()).unwrap_or_default();
    let names: Vec<&str> = s.estimators.iter().map(|e| if e.estimator == accel_ode::mc::Estimator::Accel { "ACCEL" } else { "NLS" }).collect();

    let mut header = vec!["Parameter".to_string(), "Truth".to_string()];
    for n in &names {
        header.push(format!("{n} Mean"));
        header.push(format!("{n} Coverage"));
    }
    let rows: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let mut row = vec![l.clone(), sig4(s.estimators[0].parameters[j].truth)];
            for e in &s.estimators {
                row.push(sig4(e.parameters[j].mean));
                row.push(format!("{:.3}", e.parameters[j].coverage));
            }
            row
        })
        .collect();
    out.push_str(&table(&header, &rows));
    out.push('\n');

    let mut header = vec!["Parameter".to_string()];
    for n in &names {
        header.push(format!("{n} STE"));
        header.push(format!("{n} ASYM"));
    }
    let rows: Vec<Vec<String>> = labels
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let mut row = vec![l.clone()];
            for e in &s.estimators {
                row.push(sig4(e.parameters[j].ste));
                row.push(sig4(e.parameters[j].asym));
            }
            row
        })
        .collect();
    out.push_str(&table(&header, &rows));
    for (e, n) in s.estimators.iter().zip(&names) {
        let _ = writeln!(out, "{n}: {} succeeded, {} failed", e.successes, e.failures);
        for m in &e.failure_examples {
            let _ = writeln!(out, "  e.g. {m}");
        }
    }
    for w in &s.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
