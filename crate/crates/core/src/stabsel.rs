//! Selection probabilities from repeated half-subsample refits, with
//! the error-control threshold that keeps the expected number of false
//! selections at or below one.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiEnvDataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sr::{fit_sr, importance_coef, importance_srdiff, ImportanceKind, SRConfig, SRModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionProfile {
    /// all column names of the dataset
    pub variables: Vec<String>,
    /// true for columns that entered the candidate pool in at least one
    /// subsample
    pub candidate: Vec<bool>,
    /// fraction of subsamples selecting each variable under v^SR > 0
    pub pi_sr: Vec<f64>,
    /// same under v^SRdiff > 0
    pub pi_srdiff: Vec<f64>,
    /// mean number of variables selected per subsample
    pub q_sr: f64,
    pub q_srdiff: f64,
    pub threshold_sr: f64,
    pub threshold_srdiff: f64,
    /// per variable: fraction of selecting runs with a positive
    /// averaged coefficient; None when never selected
    pub sign_fraction: Vec<Option<f64>>,
    pub n_subsamples: usize,
    pub n_failed: usize,
}

/// min(1, (1 + q²/p) / 2): solving the selection-probability error
/// bound E[V] ≤ q² / ((2π − 1) p) for E[V] = 1.
pub fn selection_threshold(q: f64, p: usize) -> f64 {
    ((1.0 + q * q / p as f64) / 2.0).min(1.0)
}

/// Signed averaged coefficient of each variable in a fitted model.
fn averaged_coefs(model: &SRModel) -> Vec<f64> {
    let mut values = vec![0.0; model.column_names.len()];
    for (w, fit) in model.weights.iter().zip(&model.fits) {
        for (&j, &c) in fit.subset.iter().zip(fit.coefs.iter()) {
            values[j] += w * c;
        }
    }
    values
}

struct SubsampleOutcome {
    selected_sr: Vec<bool>,
    selected_srdiff: Vec<bool>,
    coef_sign_positive: Vec<bool>,
    screened: Vec<usize>,
}

pub fn run_stability_selection(
    ds: &MultiEnvDataset,
    config: &SRConfig,
    n_subsamples: usize,
    rng_seed: u64,
) -> Result<SelectionProfile> {
    if n_subsamples < 20 {
        return Err(Error::InvalidArgument(
            "need at least 20 subsamples".to_string(),
        ));
    }
    for (label, rows) in ds.env_index().iter() {
        if rows.len() < 4 {
            return Err(Error::EnvironmentTooSmall {
                label: label.to_string(),
                count: rows.len(),
                min: 4,
            });
        }
    }

    let d = ds.d();
    let outcomes: Vec<Result<SubsampleOutcome>> = (0..n_subsamples)
        .into_par_iter()
        .map(|b| {
            let seed = derive_seed(rng_seed, b as u64);
            let sub = ds.subsample_half(derive_seed(seed, 0))?;
            let cfg_sr = SRConfig {
                seed: derive_seed(seed, 1),
                ..config.clone()
            };
            let cfg_pred = SRConfig {
                seed: derive_seed(seed, 2),
                ..config.to_srpred()
            };
            let model_sr = fit_sr(&sub, &cfg_sr)?;
            let model_pred = fit_sr(&sub, &cfg_pred)?;
            let v_sr = importance_coef(&model_sr);
            let v_diff = importance_srdiff(&model_sr, &model_pred, ImportanceKind::Coef)?;
            let coefs = averaged_coefs(&model_sr);
            let mut screened = model_sr.screened.clone();
            screened.extend(model_pred.screened.iter().copied());
            screened.sort_unstable();
            screened.dedup();
            Ok(SubsampleOutcome {
                selected_sr: v_sr.values.iter().map(|&v| v > 0.0).collect(),
                selected_srdiff: v_diff.values.iter().map(|&v| v > 0.0).collect(),
                coef_sign_positive: coefs.iter().map(|&c| c > 0.0).collect(),
                screened,
            })
        })
        .collect();

    let mut ok = Vec::new();
    let mut n_failed = 0usize;
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("subsample failed: {e}");
                n_failed += 1;
            }
        }
    }
    if n_failed * 5 > n_subsamples {
        return Err(Error::TooManyFailures {
            failed: n_failed,
            total: n_subsamples,
        });
    }
    let n_ok = ok.len() as f64;

    let mut pi_sr = vec![0.0; d];
    let mut pi_srdiff = vec![0.0; d];
    let mut pos_count = vec![0usize; d];
    let mut sel_count = vec![0usize; d];
    let mut candidate = vec![false; d];
    let mut diff_count = vec![0usize; d];
    let mut q_sr = 0.0;
    let mut q_srdiff = 0.0;
    for o in &ok {
        q_sr += o.selected_sr.iter().filter(|&&s| s).count() as f64 / n_ok;
        q_srdiff += o.selected_srdiff.iter().filter(|&&s| s).count() as f64 / n_ok;
        for j in 0..d {
            if o.selected_sr[j] {
                sel_count[j] += 1;
                if o.coef_sign_positive[j] {
                    pos_count[j] += 1;
                }
            }
            if o.selected_srdiff[j] {
                diff_count[j] += 1;
            }
        }
        for &j in &o.screened {
            candidate[j] = true;
        }
    }
    for j in 0..d {
        pi_sr[j] = sel_count[j] as f64 / n_ok;
        pi_srdiff[j] = diff_count[j] as f64 / n_ok;
    }
    let p = candidate.iter().filter(|&&c| c).count().max(1);
    let sign_fraction = (0..d)
        .map(|j| {
            if sel_count[j] > 0 {
                Some(pos_count[j] as f64 / sel_count[j] as f64)
            } else {
                None
            }
        })
        .collect();

    Ok(SelectionProfile {
        variables: ds.column_names().to_vec(),
        candidate,
        pi_sr,
        pi_srdiff,
        q_sr,
        q_srdiff,
        threshold_sr: selection_threshold(q_sr, p),
        threshold_srdiff: selection_threshold(q_srdiff, p),
        sign_fraction,
        n_subsamples: ok.len(),
        n_failed,
    })
}

/// Scatter-plot data: one CSV row per candidate variable plus a
/// thresholds JSON. `annotations` optionally renames variables for
/// display.
pub fn emit_selection_scatter<W: Write, V: Write>(
    profile: &SelectionProfile,
    annotations: &HashMap<String, String>,
    csv_out: W,
    json_out: V,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(csv_out);
    w.write_record([
        "variable",
        "pi_srdiff",
        "pi_sr",
        "sign_fraction",
        "selected_sr",
        "selected_srdiff",
    ])?;
    for (j, name) in profile.variables.iter().enumerate() {
        if !profile.candidate[j] {
            continue;
        }
        let display = annotations.get(name).unwrap_or(name);
        let sign = profile.sign_fraction[j]
            .map(|v| format!("{v:?}"))
            .unwrap_or_default();
        w.write_record([
            display.as_str(),
            &format!("{:?}", profile.pi_srdiff[j]),
            &format!("{:?}", profile.pi_sr[j]),
            &sign,
            &(profile.pi_sr[j] >= profile.threshold_sr).to_string(),
            &(profile.pi_srdiff[j] >= profile.threshold_srdiff).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<stream>".into(),
        source: e,
    })?;

    let thresholds = serde_json::json!({
        "threshold_sr": profile.threshold_sr,
        "threshold_srdiff": profile.threshold_srdiff,
        "n_subsamples": profile.n_subsamples,
    });
    let mut json_out = json_out;
    serde_json::to_writer_pretty(&mut json_out, &thresholds)?;
    json_out.write_all(b"\n").map_err(|e| Error::Io {
        path: "<stream>".into(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sr::{AlphaStab, SetBudget};
    use nalgebra::{DMatrix, DVector};
    use rand_distr::{Distribution, StandardNormal};

    fn strong_signal_ds(seed: u64) -> MultiEnvDataset {
        let mut rng = rng_from_seed(seed);
        let n = 160;
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            3.0 * x[(i, 0)] + 0.2 * e
        });
        let env = (0..n)
            .map(|i| if i < n / 2 { "a".into() } else { "b".into() })
            .collect();
        MultiEnvDataset::new(x, y, env, None).unwrap()
    }

    fn fast_config() -> SRConfig {
        SRConfig {
            n_sets: SetBudget::Exhaustive,
            b_boot: 20,
            // keep the stability false-rejection rate negligible so the
            // signal variable genuinely survives every subsample
            alpha_stab: AlphaStab::Value(1e-4),
            ..SRConfig::default()
        }
    }

    #[test]
    fn threshold_arithmetic() {
        assert!((selection_threshold(2.0, 50) - 0.54).abs() < 1e-12);
        assert_eq!(selection_threshold(100.0, 10), 1.0);
        assert!(selection_threshold(0.0, 10) > 0.5 - 1e-12);
    }

    #[test]
    fn always_selected_variable_gets_pi_one() {
        let ds = strong_signal_ds(1);
        let profile = run_stability_selection(&ds, &fast_config(), 20, 7).unwrap();
        assert_eq!(profile.n_failed, 0);
        assert_eq!(profile.pi_sr[0], 1.0);
        assert_eq!(profile.sign_fraction[0], Some(1.0));
        // probabilities live on the grid k / n_subsamples
        for &pi in profile.pi_sr.iter().chain(profile.pi_srdiff.iter()) {
            let scaled = pi * profile.n_subsamples as f64;
            assert!((scaled - scaled.round()).abs() < 1e-9, "pi = {pi}");
            assert!((0.0..=1.0).contains(&pi));
        }
        assert!(profile.threshold_sr > 0.5 && profile.threshold_sr <= 1.0);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let ds = strong_signal_ds(2);
        let p1 = run_stability_selection(&ds, &fast_config(), 20, 3).unwrap();
        let p2 = run_stability_selection(&ds, &fast_config(), 20, 3).unwrap();
        assert_eq!(p1.pi_sr, p2.pi_sr);
        assert_eq!(p1.pi_srdiff, p2.pi_srdiff);
        assert_eq!(p1.sign_fraction, p2.sign_fraction);
        assert_eq!(p1.q_sr, p2.q_sr);
    }

    #[test]
    fn scatter_round_trips_and_counts_rows() {
        let ds = strong_signal_ds(3);
        let profile = run_stability_selection(&ds, &fast_config(), 20, 11).unwrap();
        let mut csv_buf = Vec::new();
        let mut json_buf = Vec::new();
        emit_selection_scatter(&profile, &HashMap::new(), &mut csv_buf, &mut json_buf).unwrap();

        let text = String::from_utf8(csv_buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "variable,pi_srdiff,pi_sr,sign_fraction,selected_sr,selected_srdiff"
        );
        let n_rows = lines.count();
        let n_candidates = profile.candidate.iter().filter(|&&c| c).count();
        assert_eq!(n_rows, n_candidates);

        // values round-trip
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        for (rec, j) in rdr.records().zip(
            (0..profile.variables.len()).filter(|&j| profile.candidate[j]),
        ) {
            let rec = rec.unwrap();
            let pi_srdiff: f64 = rec[1].parse().unwrap();
            let pi_sr: f64 = rec[2].parse().unwrap();
            assert!((pi_srdiff - profile.pi_srdiff[j]).abs() < 1e-12);
            assert!((pi_sr - profile.pi_sr[j]).abs() < 1e-12);
        }

        let th: serde_json::Value = serde_json::from_slice(&json_buf).unwrap();
        assert!((th["threshold_sr"].as_f64().unwrap() - profile.threshold_sr).abs() < 1e-12);
        assert_eq!(
            th["n_subsamples"].as_u64().unwrap() as usize,
            profile.n_subsamples
        );
    }

    #[test]
    fn annotations_rename_rows() {
        let ds = strong_signal_ds(4);
        let profile = run_stability_selection(&ds, &fast_config(), 20, 13).unwrap();
        let mut ann = HashMap::new();
        ann.insert(profile.variables[0].clone(), "renamed".to_string());
        let mut csv_buf = Vec::new();
        emit_selection_scatter(&profile, &ann, &mut csv_buf, Vec::new()).unwrap();
        let text = String::from_utf8(csv_buf).unwrap();
        assert!(text.contains("renamed"));
    }

    #[test]
    fn preconditions_enforced() {
        let ds = strong_signal_ds(5);
        assert!(run_stability_selection(&ds, &fast_config(), 19, 1).is_err());
        let tiny = ds.select_rows(&[0, 1, 2, 80, 81, 82]);
        assert!(run_stability_selection(&tiny, &fast_config(), 20, 1).is_err());
    }
}
