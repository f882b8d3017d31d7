//! Experiment harness: reconstruction error, counterfactual intervention
//! outcomes, dose-selection controller comparison, and seeded replication
//! with mean/SEM aggregation, emitted as CSV plus a JSON summary.

mod dose;
mod pendulum;
mod replicate;

pub use dose::{select_dose, select_doses_batch, DoseEvalRow, DoseReport};
pub use pendulum::{
    eval_counterfactual_outcomes, eval_reconstruction, CfOutcomeReport, CfTauCell, ReconCell,
    ReconReport,
};
pub use replicate::{
    run_replications, Experiment, PendulumSuiteConfig, PkSuiteConfig, ReplicationOutput,
};

use crate::error::{Error, Result};
use crate::textio::fmt_g17;
use serde::{Deserialize, Serialize};

/// One measured cell of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub model: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    /// Within-replication SEM over samples, when defined.
    pub sem: Option<f64>,
    pub n: usize,
    pub replication: usize,
}

/// Mean and across-replication SEM for one (model, split, metric) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub sem: Option<f64>,
    pub n_reps: usize,
    /// Raw per-replication values, replication-ordered.
    pub values: Vec<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard error of the mean (sample std with n-1); None for n < 2.
pub fn sem(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Some((var / n as f64).sqrt())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Aggregate per-replication cells into mean/SEM rows keyed by
/// (model, split, metric), preserving first-seen order.
pub fn aggregate(cells: &[CellRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut buckets: std::collections::BTreeMap<(String, String, String), Vec<f64>> =
        std::collections::BTreeMap::new();
    for c in cells {
        let key = (c.model.clone(), c.split.clone(), c.metric.clone());
        if !buckets.contains_key(&key) {
            order.push(key.clone());
        }
        buckets.entry(key).or_default().push(c.value);
    }
    order
        .into_iter()
        .map(|key| {
            let values = buckets[&key].clone();
            AggregateRow {
                model: key.0,
                split: key.1,
                metric: key.2,
                mean: mean(&values),
                sem: sem(&values),
                n_reps: values.len(),
                values,
            }
        })
        .collect()
}

/// Per-cell CSV: `model,split,metric,value,sem,n,replication`.
pub fn cells_to_csv(cells: &[CellRow]) -> String {
    let mut out = String::from("model,split,metric,value,sem,n,replication\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.model,
            c.split,
            c.metric,
            fmt_g17(c.value),
            c.sem.map(fmt_g17).unwrap_or_default(),
            c.n,
            c.replication
        ));
    }
    out
}

/// Aggregate CSV: `model,split,metric,mean,sem,n_reps`.
pub fn aggregates_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("model,split,metric,mean,sem,n_reps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model,
            r.split,
            r.metric,
            fmt_g17(r.mean),
            r.sem.map(fmt_g17).unwrap_or_default(),
            r.n_reps
        ));
    }
    out
}

/// Write the report triplet (cells CSV, aggregate CSV, JSON summary) into
/// `dir` with the run id in every file name.
pub fn write_report(
    dir: &std::path::Path,
    run_id: &str,
    cells: &[CellRow],
    aggregates: &[AggregateRow],
    failures: &[(usize, String)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join(format!("report_{run_id}_cells.csv")),
        cells_to_csv(cells),
    )?;
    std::fs::write(
        dir.join(format!("report_{run_id}_aggregate.csv")),
        aggregates_to_csv(aggregates),
    )?;
    #[derive(Serialize)]
    struct Summary<'a> {
        run_id: &'a str,
        aggregates: &'a [AggregateRow],
        failures: &'a [(usize, String)],
    }
    let json = serde_json::to_string_pretty(&Summary {
        run_id,
        aggregates,
        failures,
    })
    .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(dir.join(format!("report_{run_id}_summary.json")), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sem_is_std_over_sqrt_n() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        // sample std = sqrt(5/3), sem = sqrt(5/3)/2
        let expect = (5.0f64 / 3.0).sqrt() / 2.0;
        assert!((sem(&vals).unwrap() - expect).abs() < 1e-12);
        assert_eq!(sem(&[1.0]), None);
    }

    #[test]
    fn identical_replications_have_zero_sem() {
        let cells: Vec<CellRow> = (0..2)
            .map(|rep| CellRow {
                model: "hybrid".into(),
                split: "ood".into(),
                metric: "mse".into(),
                value: 0.25,
                sem: None,
                n: 10,
                replication: rep,
            })
            .collect();
        let agg = aggregate(&cells);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].mean, 0.25);
        assert_eq!(agg[0].sem, Some(0.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
