//! Per-case metric CSVs, Welch comparisons between arms and the summary
//! table.

use std::fmt::Write as _;
use std::path::Path;

use refdiff_core::metrics::{
    cell_values, summarize, welch_t_test, ClassMetrics, Flag, Metric, MetricError, MetricReport, Value, WelchResult,
};
use refdiff_core::Class;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::store::write_file;

fn metrics_header() -> Vec<String> {
    let mut h = vec!["case_id".to_string(), "class".to_string()];
    for m in Metric::ALL {
        h.push(m.name().to_string());
        h.push(format!("{}_flag", m.name()));
    }
    h
}

fn flag_from_name(s: &str) -> Result<Option<Flag>> {
    Ok(match s {
        "" => None,
        "both_empty" => Some(Flag::BothEmpty),
        "one_empty" => Some(Flag::OneEmpty),
        "undefined" => Some(Flag::Undefined),
        other => return Err(CliError::Data(format!("unknown flag '{other}'"))),
    })
}

fn class_from_name(s: &str) -> Result<Class> {
    Class::FOREGROUND
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| CliError::Data(format!("unknown class '{s}'")))
}

/// One row per (case, class); values use the shortest round-trip form so
/// the file reloads exactly.
pub fn metrics_csv(reports: &[MetricReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(metrics_header())?;
    for r in reports {
        for (class, cm) in Class::FOREGROUND.iter().zip(&r.classes) {
            let mut row = vec![r.case_id.clone(), class.name().to_string()];
            for m in Metric::ALL {
                let v = cm.get(m);
                row.push(v.value.map(|x| x.to_string()).unwrap_or_default());
                row.push(v.flag.map(|f| f.name().to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    write_file(path, &metrics_csv(reports)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    parse_metrics_csv(&bytes).map_err(|e| match e {
        CliError::Data(msg) => CliError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse the per-case metrics table written by [`metrics_csv`].
pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != metrics_header() {
        return Err(CliError::Data(format!("metric schema differs from {:?}", metrics_header())));
    }
    let mut reports: Vec<MetricReport> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let class = class_from_name(&rec[1])?;
        let mut vals = Vec::with_capacity(6);
        for k in 0..Metric::ALL.len() {
            let raw = &rec[2 + 2 * k];
            let value = if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|_| CliError::Data(format!("bad value '{raw}'")))?)
            };
            vals.push(Value {
                value,
                flag: flag_from_name(&rec[3 + 2 * k])?,
            });
        }
        let cm = ClassMetrics {
            dsc: vals[0],
            iou: vals[1],
            asd: vals[2],
            assd: vals[3],
            hd: vals[4],
            hd95: vals[5],
        };
        let slot = Class::FOREGROUND.iter().position(|c| *c == class).expect("foreground class");
        match reports.last_mut() {
            Some(last) if last.case_id == rec[0] && last.classes.len() == slot => last.classes.push(cm),
            _ if slot == 0 => reports.push(MetricReport {
                case_id: rec[0].to_string(),
                classes: vec![cm],
            }),
            _ => return Err(CliError::Data(format!("classes out of order for {}", &rec[0]))),
        }
    }
    if reports.iter().any(|r| r.classes.len() != Class::FOREGROUND.len()) {
        return Err(CliError::Data("incomplete case rows".into()));
    }
    Ok(reports)
}

/// Welch's test with a convention for constant samples: equal constants
/// give `t = 0, p = 1`, different constants an infinite `t` and `p = 0`.
/// `None` when either side has fewer than two values.
pub fn compare_values(x: &[f64], y: &[f64]) -> Result<Option<WelchResult>> {
    match welch_t_test(x, y) {
        Ok(r) => Ok(Some(r)),
        Err(MetricError::InsufficientData { .. }) => Ok(None),
        Err(MetricError::ZeroVariance) => {
            let (mx, my) = (x[0], y[0]);
            let df = (x.len() + y.len() - 2) as f64;
            Ok(Some(if mx == my {
                WelchResult { t: 0.0, df, p: 1.0 }
            } else {
                WelchResult {
                    t: if mx > my { f64::INFINITY } else { f64::NEG_INFINITY },
                    df,
                    p: 0.0,
                }
            }))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: Metric,
    pub class: Class,
    pub arm_a: String,
    pub arm_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch: Option<WelchResult>,
}

impl Comparison {
    /// Whether arm A beats arm B at significance level `alpha`.
    pub fn a_better(&self, alpha: f64) -> bool {
        let better = if self.metric.higher_is_better() {
            self.mean_a > self.mean_b
        } else {
            self.mean_a < self.mean_b
        };
        better && self.welch.is_some_and(|w| w.p < alpha)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Welch comparisons for every metric and class between two arms.
pub fn compare_arms(a: (&str, &[MetricReport]), b: (&str, &[MetricReport])) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for m in Metric::ALL {
        for class in Class::FOREGROUND {
            let (x, _) = cell_values(a.1, class, m);
            let (y, _) = cell_values(b.1, class, m);
            out.push(Comparison {
                metric: m,
                class,
                arm_a: a.0.to_string(),
                arm_b: b.0.to_string(),
                n_a: x.len(),
                n_b: y.len(),
                mean_a: mean(&x),
                mean_b: mean(&y),
                welch: compare_values(&x, &y)?,
            });
        }
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[Comparison]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "class", "arm_a", "arm_b", "n_a", "n_b", "mean_a", "mean_b", "t", "df", "p"])?;
    for r in rows {
        let (t, df, p) = r
            .welch
            .map(|w| (w.t.to_string(), w.df.to_string(), w.p.to_string()))
            .unwrap_or_default();
        w.write_record([
            r.metric.name().to_string(),
            r.class.name().to_string(),
            r.arm_a.clone(),
            r.arm_b.clone(),
            r.n_a.to_string(),
            r.n_b.to_string(),
            r.mean_a.to_string(),
            r.mean_b.to_string(),
            t,
            df,
            p,
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub arm: String,
    pub class: Class,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
    pub excluded: usize,
    pub flagged: usize,
    pub best: bool,
}

/// Mean and 95% interval per arm, class and metric, with the best arm of
/// each (class, metric) group marked: highest for overlaps, lowest for
/// distances.
pub fn summarize_arms(arms: &[(String, Vec<MetricReport>)]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for class in Class::FOREGROUND {
        for m in Metric::ALL {
            let start = rows.len();
            for (name, reports) in arms {
                let (values, excluded) = cell_values(reports, class, m);
                let flagged = reports
                    .iter()
                    .filter(|r| r.get(class, m).is_some_and(|v| v.counts() && v.flag.is_some()))
                    .count();
                let (mean, half_width) = match summarize(&values) {
                    Ok(s) => (s.mean, s.half_width),
                    Err(MetricError::InsufficientData { .. }) => (mean(&values), f64::NAN),
                    Err(e) => return Err(e.into()),
                };
                rows.push(SummaryRow {
                    arm: name.clone(),
                    class,
                    metric: m,
                    n: values.len(),
                    mean,
                    half_width,
                    excluded,
                    flagged,
                    best: false,
                });
            }
            let group = &mut rows[start..];
            let key = |r: &SummaryRow| if m.higher_is_better() { r.mean } else { -r.mean };
            let best = group.iter().map(key).filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            for r in group.iter_mut() {
                r.best = key(r) == best;
            }
        }
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "class", "metric", "n", "mean", "half_width", "excluded", "flagged", "best"])?;
    for r in rows {
        w.write_record([
            r.arm.clone(),
            r.class.name().to_string(),
            r.metric.name().to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            r.half_width.to_string(),
            r.excluded.to_string(),
            r.flagged.to_string(),
            u8::from(r.best).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// Aligned text table, one line per (class, metric) and one column per arm.
/// The best arm of each line carries a `*`.
pub fn render_table(rows: &[SummaryRow], arms: &[String]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut head = vec!["class".to_string(), "metric".to_string()];
    head.extend(arms.iter().cloned());
    cells.push(head);
    for group in rows.chunks(arms.len().max(1)) {
        let mut line = vec![group[0].class.name().to_string(), group[0].metric.name().to_string()];
        for r in group {
            line.push(format!("{:.3} ± {:.3}{}", r.mean, r.half_width, if r.best { " *" } else { "" }));
        }
        cells.push(line);
    }
    let cols = cells[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("# surface distances in mm, slice-wise 2D; * marks the best arm\n");
    for line in &cells {
        let padded: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    }
    out
}
