//! Text renderings of reports: CSV, JSON and aligned tables.

use std::fmt::Write as _;

use serde::Serialize;
use tcmcap::{CapacityReport, Level, McEstimate};

/// Parameter columns in table order: `γ_sq, γ_sq^(p), p_r..p₂, q_r..q₂,
/// c_r..c₂`, padded with zeros below the report's level.
fn param_columns(report: &CapacityReport, max_r: usize) -> Vec<f64> {
    let p = &report.params;
    let pick = |v: &[f64], k: usize| if p.r >= k { v[k - 2] } else { 0.0 };
    let mut cols = vec![p.gamma_sq, p.gamma_sq_p];
    for v in [&p.p, &p.q, &p.c] {
        cols.extend((2..=max_r).rev().map(|k| pick(v, k)));
    }
    cols
}

fn param_headers(max_r: usize, pretty: bool) -> Vec<String> {
    let mut h: Vec<String> = if pretty {
        vec!["γ_sq".into(), "γ_sq^(p)".into()]
    } else {
        vec!["gamma_sq".into(), "gamma_sq_p".into()]
    };
    for name in ["p", "q", "c"] {
        h.extend((2..=max_r).rev().map(|k| format!("{name}{k}")));
    }
    h
}

pub fn capacity_csv(reports: &[CapacityReport]) -> String {
    let max_r = reports.iter().map(|r| r.params.r).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let mut header = vec!["activation".to_string(), "level".into(), "variant".into()];
    header.extend(param_headers(max_r, false));
    header.extend(
        [
            "alpha_c",
            "stationarity_residual",
            "psi_residual",
            "closed_form_residual",
            "collapsed",
        ]
        .map(String::from),
    );
    writeln!(out, "{}", header.join(",")).unwrap();
    for r in reports {
        let mut row = vec![
            r.activation.clone(),
            r.level.to_string(),
            variant_tag(r).to_string(),
        ];
        row.extend(param_columns(r, max_r).iter().map(|v| v.to_string()));
        row.push(r.alpha_c.to_string());
        row.push(format!("{:e}", r.stationarity_residual));
        row.push(format!("{:e}", r.psi_residual));
        row.push(format!("{:e}", r.closed_form_residual));
        row.push(r.collapsed.to_string());
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

fn variant_tag(r: &CapacityReport) -> &'static str {
    match (r.level, r.collapsed) {
        (Level::TwoPartial, true) => "partial-collapsed",
        (Level::TwoPartial, false) => "partial",
        _ => "full",
    }
}

pub fn capacity_pretty(reports: &[CapacityReport]) -> String {
    let max_r = reports.iter().map(|r| r.params.r).max().unwrap_or(3).max(3);
    let mut header = vec!["activation".to_string(), "level".into()];
    header.extend(param_headers(max_r, true));
    header.push("α_c".into());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.activation.clone(), r.level.to_string()];
            row.extend(param_columns(r, max_r).iter().map(|v| format!("{v:.4}")));
            row.push(format!("{:.6}", r.alpha_c));
            row
        })
        .collect();
    let mut out = table(&header, &rows);
    for r in reports {
        writeln!(
            out,
            "{} {}: stationarity {:.1e}, |ψ| {:.1e}, closed-form {:.1e}{}, {:.2} s",
            r.activation,
            r.level,
            r.stationarity_residual,
            r.psi_residual,
            r.closed_form_residual,
            if r.collapsed {
                ", no progress over level 1"
            } else {
                ""
            },
            r.wall_time
        )
        .unwrap();
    }
    out
}

pub fn json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([header[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: &[String]| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header);
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// One cell of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub activation: String,
    pub level: Level,
    pub report: Option<CapacityReport>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub activations: Vec<String>,
    pub levels: Vec<Level>,
    pub cells: Vec<SweepCell>,
}

impl Sweep {
    fn cell(&self, act: &str, level: Level) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.activation == act && c.level == level)
    }

    fn matrix(&self, fmt: impl Fn(f64) -> String) -> Vec<Vec<String>> {
        self.levels
            .iter()
            .map(|&l| {
                std::iter::once(l.to_string())
                    .chain(self.activations.iter().map(|a| {
                        match self.cell(a, l).and_then(|c| c.report.as_ref()) {
                            Some(r) => fmt(r.alpha_c),
                            None => String::new(),
                        }
                    }))
                    .collect()
            })
            .collect()
    }

    fn header(&self) -> Vec<String> {
        std::iter::once("level".to_string())
            .chain(self.activations.iter().cloned())
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", self.header().join(","));
        for row in self.matrix(|v| v.to_string()) {
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        out
    }

    pub fn pretty(&self) -> String {
        let mut out = table(&self.header(), &self.matrix(|v| format!("{v:.4}")));
        for c in &self.cells {
            if let Some(e) = &c.error {
                writeln!(out, "{} {}: failed: {e}", c.activation, c.level).unwrap();
            }
        }
        out
    }

    /// Long-format plot data: one row per solved cell.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("activation,level,r,variant,alpha_c\n");
        for a in &self.activations {
            for &l in &self.levels {
                if let Some(r) = self.cell(a, l).and_then(|c| c.report.as_ref()) {
                    writeln!(out, "{a},{l},{},{},{}", l.r(), variant_tag(r), r.alpha_c).unwrap();
                }
            }
        }
        out
    }
}

#[derive(Debug, Serialize)]
pub struct OracleOutput {
    pub activation: String,
    pub d: usize,
    pub samples: usize,
    pub seed: u64,
    pub polish: bool,
    #[serde(flatten)]
    pub estimate: McEstimate,
    pub limit: f64,
    pub gap: f64,
}

impl OracleOutput {
    pub fn csv(&self) -> String {
        format!(
            "activation,d,samples,seed,polish,mean,stderr,n_infeasible_fallbacks,limit,gap\n\
             {},{},{},{},{},{},{},{},{},{}\n",
            self.activation,
            self.d,
            self.samples,
            self.seed,
            self.polish,
            self.estimate.mean,
            self.estimate.stderr,
            self.estimate.n_infeasible_fallbacks,
            self.limit,
            self.gap
        )
    }

    pub fn pretty(&self) -> String {
        format!(
            "{} d={} samples={} seed={}\nmean   {:.6} ± {:.6}\nlimit  {:.6}\ngap    {:.2e}\nrescaled draws  {}\n",
            self.activation,
            self.d,
            self.samples,
            self.seed,
            self.estimate.mean,
            self.estimate.stderr,
            self.limit,
            self.gap,
            self.estimate.n_infeasible_fallbacks
        )
    }
}

/// `v` with 12 significant digits.
pub fn sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (11 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn pbar_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("p,pbar\n");
    for (p, v) in points {
        writeln!(out, "{},{}", sig12(*p), sig12(*v)).unwrap();
    }
    out
}

pub fn pbar_pretty(points: &[(f64, f64)]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|(p, v)| vec![sig12(*p), sig12(*v)])
        .collect();
    table(&["p".into(), "pbar".into()], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(sig12(0.25), "0.250000000000");
        assert_eq!(sig12(1.0), "1.00000000000");
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(0.0123), "0.0123000000000");
    }

    #[test]
    fn tables_align() {
        let t = table(
            &["a".into(), "bb".into()],
            &[vec!["ccc".into(), "d".into()]],
        );
        assert_eq!(t, "a    bb\nccc  d\n");
    }
}
