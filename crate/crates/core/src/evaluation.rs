//! ROC analysis and per-condition aggregation of AUROC values.
//!
//! Scores follow the artifact-wide convention: higher means more normal.
//! Anomalies are the positive class and are detected by low scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scoring::Strategy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: u64,
    pub score: f64,
    pub is_anomaly: bool,
}

fn class_counts(records: &[EvalRecord]) -> Result<(usize, usize)> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "image {} has non-finite score {}",
            r.image_id, r.score
        )));
    }
    let anomalies = records.iter().filter(|r| r.is_anomaly).count();
    let normals = records.len() - anomalies;
    if anomalies == 0 || normals == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUROC needs both classes; got {normals} normal and {anomalies} anomalous records"
        )));
    }
    Ok((normals, anomalies))
}

fn sorted_by_score(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    sorted
}

/// Probability that a random anomaly scores below a random normal record,
/// ties counted as one half.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let (normals, anomalies) = class_counts(records)?;
    let sorted = sorted_by_score(records);
    // Twice the Mann-Whitney U of the normal class, kept integral.
    let mut twice_u: u128 = 0;
    let mut anomalies_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let group = &sorted[i..j];
        let a = group.iter().filter(|r| r.is_anomaly).count() as u128;
        let n = group.len() as u128 - a;
        twice_u += n * (2 * anomalies_below + a);
        anomalies_below += a;
        i = j;
    }
    let pairs = 2 * normals as u128 * anomalies as u128;
    // Evaluate the smaller side and complement, so that negating the scores
    // gives exactly 1 - auroc.
    Ok(if 2 * twice_u <= pairs {
        twice_u as f64 / pairs as f64
    } else {
        1.0 - (pairs - twice_u) as f64 / pairs as f64
    })
}

/// ROC points `(false-positive rate, true-positive rate)` from `(0, 0)` to
/// `(1, 1)`, sweeping the "flag as anomaly if score ≤ t" threshold upward
/// through every distinct score.
pub fn roc_curve(records: &[EvalRecord]) -> Result<Vec<(f64, f64)>> {
    let (normals, anomalies) = class_counts(records)?;
    let sorted = sorted_by_score(records);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_anomaly {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / normals as f64, tp as f64 / anomalies as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// AUROC of one strategy for one known-anomaly digit across trials.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary {
    pub strategy: Strategy,
    pub known_anomaly_digit: u8,
    pub trials: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn summarize(strategy: Strategy, known_anomaly_digit: u8, trials: &[f64]) -> Result<ConditionSummary> {
    if trials.is_empty() {
        return Err(Error::InvalidArgument("summary needs at least one trial".into()));
    }
    let n = trials.len() as f64;
    let mean = trials.iter().sum::<f64>() / n;
    let var = trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(ConditionSummary {
        strategy,
        known_anomaly_digit,
        trials: trials.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

/// One CSV row per summary: strategy, digit, trial count, mean, std, then
/// the individual trials separated by `;`.
pub fn summaries_csv(summaries: &[ConditionSummary]) -> String {
    let mut out = String::from("strategy,known_anomaly_digit,trials,mean_auroc,std_auroc,per_trial\n");
    for s in ordered(summaries) {
        let per: Vec<String> = s.trials.iter().map(|t| format!("{t:.6}")).collect();
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            s.strategy,
            s.known_anomaly_digit,
            s.trials.len(),
            s.mean,
            s.std,
            per.join(";")
        )
        .expect("string write");
    }
    out
}

fn ordered(summaries: &[ConditionSummary]) -> Vec<&ConditionSummary> {
    let mut v: Vec<&ConditionSummary> = summaries.iter().collect();
    v.sort_by_key(|s| (s.strategy, s.known_anomaly_digit));
    v
}

/// Fixed-point without the leading zero, as in `.63`.
fn short(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    s.strip_prefix('0').map(str::to_owned).unwrap_or(s)
}

/// Plain-text table: one row per strategy, one column per known-anomaly
/// digit plus the average of the per-digit means.
pub fn summaries_table(summaries: &[ConditionSummary]) -> String {
    let digits: Vec<u8> = {
        let mut d: Vec<u8> = summaries.iter().map(|s| s.known_anomaly_digit).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let mut rows: BTreeMap<Strategy, BTreeMap<u8, &ConditionSummary>> = BTreeMap::new();
    for s in summaries {
        rows.entry(s.strategy).or_default().insert(s.known_anomaly_digit, s);
    }
    let mut header = vec!["method".to_string()];
    header.extend(digits.iter().map(|d| format!("known {d}")));
    header.push("average".into());
    let mut table = vec![header];
    for (strategy, cells) in &rows {
        let mut row = vec![strategy.to_string()];
        for d in &digits {
            row.push(cells.get(d).map_or("-".into(), |s| format!("{}±{}", short(s.mean, 2), short(s.std, 2))));
        }
        let means: Vec<f64> = cells.values().map(|s| s.mean).collect();
        let stds: Vec<f64> = cells.values().map(|s| s.std).collect();
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        row.push(format!("{}±{}", short(avg(&means), 3), short(avg(&stds), 2)));
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", cells.join(" | ").trim_end()).expect("string write");
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("-+-")).expect("string write");
        }
    }
    out
}
