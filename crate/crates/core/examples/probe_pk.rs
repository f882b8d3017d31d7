//! Scratch diagnostics for the PK protocol calibration (not part of the
//! test suite).

use greybox::datagen::{gen_pk_cohort_synthetic, label_optimal_dose, DoseProtocol};
use greybox::mechanistic::PkParamTable;

fn main() {
    let oracle = PkParamTable::oracle();
    let prior = PkParamTable::prior();
    let protocol = DoseProtocol::default();
    let covs = gen_pk_cohort_synthetic(300, 42);

    let mut edge_low = [0; 2];
    let mut edge_high = [0; 2];
    let mut interior = [0; 2];
    let mut unsafe_all = 0;
    let mut prior_unsafe = 0;
    let mut prior_diff_sum = 0.0;
    let mut n_ok = 0;

    for cov in &covs {
        let bracket = if cov.age < 55.0 { 0 } else { 1 };
        let d = label_optimal_dose(cov, &protocol, &oracle).unwrap();
        match d.selected {
            None => unsafe_all += 1,
            Some(i) => {
                if i == 0 {
                    edge_low[bracket] += 1;
                } else if i + 1 == d.candidates.len() {
                    edge_high[bracket] += 1;
                } else {
                    interior[bracket] += 1;
                }
                // What would the prior controller pick?
                if let Ok(pd) = label_optimal_dose(cov, &protocol, &prior) {
                    if pd.selected.is_none() {
                        prior_unsafe += 1;
                    } else {
                        prior_diff_sum +=
                            (pd.chosen_dose() - d.chosen_dose()).abs() / d.chosen_dose();
                        n_ok += 1;
                    }
                }
            }
        }
    }
    println!("oracle young: interior={} edge_low={} edge_high={}", interior[0], edge_low[0], edge_high[0]);
    println!("oracle old:   interior={} edge_low={} edge_high={}", interior[1], edge_low[1], edge_high[1]);
    println!("all_unsafe={unsafe_all}");
    println!(
        "prior-as-controller: all-unsafe={prior_unsafe}, mean APE vs oracle selection = {:.1}%",
        100.0 * prior_diff_sum / n_ok.max(1) as f64
    );

    // Ce trajectory sanity for one mid-grid patient.
    let cov = covs[0];
    let d = label_optimal_dose(&cov, &protocol, &oracle).unwrap();
    println!(
        "example: age={:.0} w={:.0} bmi={:.1} target={:.2} selected={:?} ce_max per dose = {:?}",
        cov.age,
        cov.weight,
        cov.bmi(),
        d.ce_target,
        d.selected,
        d.candidates
            .iter()
            .map(|c| (c.dose_mg_per_kg, (c.max_ce * 100.0).round() / 100.0, c.safe))
            .collect::<Vec<_>>()
    );
}
