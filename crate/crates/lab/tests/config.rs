//! Config validation properties.

mod common;

use std::path::Path;

use homogenize_lab::{ExperimentConfig, LabError};
use proptest::prelude::*;

fn with_sweep(eps: &[f64], b: &[f64]) -> String {
    common::config_text("trivial.toml")
        .lines()
        .map(|l| {
            if l.starts_with("eps =") {
                format!("eps = {eps:?}")
            } else if l.starts_with("b_schedule =") {
                format!("b_schedule = {b:?}")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn rejected_field(text: &str) -> Option<String> {
    match ExperimentConfig::parse(text, Path::new("sweep.toml")) {
        Ok(_) => None,
        Err(LabError::Config { message, .. }) => Some(message),
        Err(e) => panic!("unexpected error kind: {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eps_sweep_must_strictly_decrease(ks in prop::collection::vec(1i32..6, 1..5)) {
        let eps: Vec<f64> = ks.iter().map(|&k| 2f64.powi(-k)).collect();
        let decreasing = eps.windows(2).all(|w| w[1] < w[0]);
        let verdict = rejected_field(&with_sweep(&eps, &[4.0, 8.0, 16.0, 32.0]));
        prop_assert_eq!(verdict.is_none(), decreasing);
        if let Some(msg) = verdict {
            prop_assert!(msg.contains("`sweep.eps`"), "{}", msg);
        }
    }

    #[test]
    fn b_schedule_must_increase_with_enough_entries(b in prop::collection::vec(1u32..64, 1..7)) {
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ok = b.len() >= 4 && b.windows(2).all(|w| w[1] > w[0]);
        let verdict = rejected_field(&with_sweep(&[0.25, 0.125], &b));
        prop_assert_eq!(verdict.is_none(), ok);
        if let Some(msg) = verdict {
            prop_assert!(msg.contains("`sweep.b_schedule`"), "{}", msg);
        }
    }
}
