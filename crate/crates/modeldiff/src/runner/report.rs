//! Report rows, metric filters, and the per-method summary CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hypothesis::{Direction, Hypothesis, Method};
use crate::metrics::{mean_ci, AcceptanceReport, HypothesisEval};

/// One report line: a pure projection of a hypothesis and its eval bundle,
/// with no recomputation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub hypothesis_id: String,
    pub text: String,
    pub method: Method,
    pub direction: Direction,
    pub f: f64,
    pub acc: Option<f64>,
    pub vfd: f64,
    pub accepted: bool,
    pub interestingness: Option<f64>,
    pub abstraction: Option<f64>,
}

impl ReportRow {
    pub fn from_eval(hypothesis: &Hypothesis, eval: &HypothesisEval) -> Self {
        Self {
            hypothesis_id: hypothesis.id.clone(),
            text: hypothesis.text.clone(),
            method: hypothesis.method,
            direction: hypothesis.direction,
            f: eval.f,
            acc: eval.acc,
            vfd: eval.vfd,
            accepted: eval.accepted,
            interestingness: eval.interestingness,
            abstraction: eval.abstraction,
        }
    }
}

/// Conjunction of optional thresholds; omitted criteria pass everything.
/// A row missing a value a criterion needs (undefined accuracy, unrated
/// interestingness) does not pass that criterion.
#[derive(Debug, Clone, Default)]
pub struct FilterCriteria {
    pub min_f: Option<f64>,
    pub min_acc: Option<f64>,
    pub min_interestingness: Option<f64>,
    pub abstraction_min: Option<f64>,
    pub abstraction_max: Option<f64>,
}

impl FilterCriteria {
    pub fn is_empty(&self) -> bool {
        self.min_f.is_none()
            && self.min_acc.is_none()
            && self.min_interestingness.is_none()
            && self.abstraction_min.is_none()
            && self.abstraction_max.is_none()
    }
}

pub fn filter_report(rows: &[ReportRow], criteria: &FilterCriteria) -> Vec<ReportRow> {
    rows.iter()
        .filter(|row| {
            if let Some(min_f) = criteria.min_f {
                if row.f < min_f {
                    return false;
                }
            }
            if let Some(min_acc) = criteria.min_acc {
                if !row.acc.is_some_and(|a| a >= min_acc) {
                    return false;
                }
            }
            if let Some(min_int) = criteria.min_interestingness {
                if !row.interestingness.is_some_and(|v| v >= min_int) {
                    return false;
                }
            }
            if let Some(lo) = criteria.abstraction_min {
                if !row.abstraction.is_some_and(|v| v >= lo) {
                    return false;
                }
            }
            if let Some(hi) = criteria.abstraction_max {
                if !row.abstraction.is_some_and(|v| v <= hi) {
                    return false;
                }
            }
            true
        })
        .cloned()
        .collect()
}

fn push_metric_row(
    out: &mut String,
    method: Method,
    metric: &str,
    values: &[f64],
) {
    if values.is_empty() {
        return;
    }
    let ci = mean_ci(values, 0.95).expect("non-empty values");
    let half = ci
        .half_width
        .map(|h| format!("{h:.6}"))
        .unwrap_or_default();
    out.push_str(&format!(
        "{method},{metric},{:.6},{half},{}\n",
        ci.mean, ci.n
    ));
}

/// Per-method summary: mean and 95% t-interval for each metric over
/// hypotheses, plus the acceptance rate. Columns:
/// `method,metric,mean,ci_half_width,n`.
pub fn summary_csv(
    rows: &[ReportRow],
    acceptance_by_method: &BTreeMap<String, AcceptanceReport>,
) -> String {
    let mut out = String::from("method,metric,mean,ci_half_width,n\n");
    for method in [Method::Llm, Method::Sae, Method::Kl] {
        let of_method: Vec<&ReportRow> = rows.iter().filter(|r| r.method == method).collect();
        if of_method.is_empty() && !acceptance_by_method.contains_key(&method.to_string()) {
            continue;
        }
        let collect = |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Vec<f64> {
            of_method.iter().filter_map(|r| f(r)).collect()
        };
        push_metric_row(&mut out, method, "frequency", &collect(&|r| Some(r.f)));
        push_metric_row(&mut out, method, "accuracy", &collect(&|r| r.acc));
        push_metric_row(&mut out, method, "vfd", &collect(&|r| Some(r.vfd)));
        push_metric_row(
            &mut out,
            method,
            "interestingness",
            &collect(&|r| r.interestingness),
        );
        push_metric_row(&mut out, method, "abstraction", &collect(&|r| r.abstraction));
        if let Some(report) = acceptance_by_method.get(&method.to_string()) {
            out.push_str(&format!(
                "{method},acceptance_rate,{:.6},,{}\n",
                report.rate, report.total
            ));
        }
    }
    out
}
