use cil_core::metrics::{average_accuracy, per_group_accuracy, stage_accuracy};
use proptest::prelude::*;

proptest! {
    #[test]
    fn groups_recombine_to_overall(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80), split in 0usize..7) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let overall = stage_accuracy(&preds, &labels).unwrap();
        let g = per_group_accuracy(&preds, &labels, |l| l < split).unwrap();
        let total = (g.old_count + g.new_count) as f64;
        let recombined = g.old.unwrap_or(0.0) * g.old_count as f64 / total + g.new.unwrap_or(0.0) * g.new_count as f64 / total;
        prop_assert!((recombined - overall).abs() <= 1e-12);
    }

    #[test]
    fn average_is_the_arithmetic_mean(acc in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let avg = average_accuracy(&acc).unwrap();
        prop_assert_eq!(avg, acc.iter().sum::<f64>() / acc.len() as f64);
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-15 <= avg && avg <= hi + 1e-15);
    }
}
