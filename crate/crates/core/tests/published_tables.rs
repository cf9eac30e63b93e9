//! Arithmetic of the published per-class results, reproduced from counts.

use poster_core::metrics::{
    mean_class_accuracy, mean_of_defined, prediction_percentage_table, round2, ConfusionMatrix,
    EvalReport,
};

/// Test images per class on the 7-class benchmark: Neutral, Happy, Sad,
/// Surprise, Fear, Disgust, Anger.
const TEST_COUNTS: [u64; 7] = [680, 1185, 478, 329, 74, 160, 162];

const PROPOSED_ACC: [f64; 7] = [92.35, 96.96, 91.21, 90.27, 67.57, 75.00, 88.89];
const BASELINE_ACC: [f64; 7] = [90.44, 96.71, 90.38, 87.23, 62.16, 76.25, 88.89];

/// Correct predictions per class implied by the accuracies above.
const PROPOSED_CORRECT: [u64; 7] = [628, 1149, 436, 297, 50, 120, 144];
const BASELINE_CORRECT: [u64; 7] = [615, 1146, 432, 287, 46, 122, 144];

/// Confusion matrix with the given diagonal; misses go to the next class.
fn confusion(correct: &[u64; 7]) -> ConfusionMatrix {
    let mut rows = vec![vec![0u64; 7]; 7];
    for c in 0..7 {
        rows[c][c] = correct[c];
        rows[c][(c + 1) % 7] = TEST_COUNTS[c] - correct[c];
    }
    ConfusionMatrix::from_counts(&rows).unwrap()
}

#[test]
fn class_mean_of_published_accuracies() {
    let mean = |v: &[f64; 7]| mean_of_defined(&v.map(Some)).unwrap();
    assert!((mean(&PROPOSED_ACC) - 86.04).abs() <= 0.01);
    assert!((mean(&BASELINE_ACC) - 84.58).abs() <= 0.01);
}

#[test]
fn class_mean_from_reconstructed_counts() {
    for (correct, acc, want) in [
        (&PROPOSED_CORRECT, &PROPOSED_ACC, 86.04),
        (&BASELINE_CORRECT, &BASELINE_ACC, 84.58),
    ] {
        let cm = confusion(correct);
        let report = EvalReport::from_confusion(cm.clone()).unwrap();
        for (c, a) in report.per_class_accuracy.iter().enumerate() {
            assert_eq!(round2(100.0 * a.unwrap()), acc[c], "class {c}");
        }
        let mean = 100.0 * mean_class_accuracy(&cm).unwrap();
        assert!((round2(mean) - want).abs() <= 0.01, "{mean}");
    }
}

/// Neutral rows of the prediction-percentage table, as counts out of 680.
const BASELINE_NEUTRAL: [u64; 7] = [615, 17, 31, 11, 0, 5, 1];
const BASELINE_NEUTRAL_PCT: [f64; 7] = [90.44, 2.50, 4.56, 1.62, 0.00, 0.74, 0.15];
const PROPOSED_NEUTRAL: [u64; 7] = [628, 13, 29, 9, 0, 1, 0];
const PROPOSED_NEUTRAL_PCT: [f64; 7] = [92.35, 1.91, 4.26, 1.32, 0.00, 0.15, 0.00];

/// Fear rows, counts out of 74.
const BASELINE_FEAR: [u64; 7] = [2, 4, 8, 11, 46, 2, 1];
const BASELINE_FEAR_PCT: [f64; 7] = [2.70, 5.41, 10.81, 14.86, 62.16, 2.70, 1.35];

fn single_row(counts: &[u64; 7]) -> Vec<f64> {
    let mut rows = vec![vec![0u64; 7]; 7];
    rows[0] = counts.to_vec();
    let cm = ConfusionMatrix::from_counts(&rows).unwrap();
    prediction_percentage_table(&cm)[0].clone().unwrap()
}

#[test]
fn percentage_rows_sum_to_one_hundred_before_rounding() {
    for counts in [&BASELINE_NEUTRAL, &PROPOSED_NEUTRAL, &BASELINE_FEAR] {
        let row = single_row(counts);
        assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }
}

#[test]
fn rounded_rows_match_published_rows() {
    for (counts, published) in [
        (&BASELINE_NEUTRAL, &BASELINE_NEUTRAL_PCT),
        (&PROPOSED_NEUTRAL, &PROPOSED_NEUTRAL_PCT),
        (&BASELINE_FEAR, &BASELINE_FEAR_PCT),
    ] {
        let rounded: Vec<f64> = single_row(counts).into_iter().map(round2).collect();
        assert_eq!(rounded, published.to_vec());
    }
}

#[test]
fn baseline_neutral_rounded_row_sums_to_100_01() {
    let rounded: f64 = single_row(&BASELINE_NEUTRAL).into_iter().map(round2).sum();
    assert_eq!(round2(rounded), 100.01);
}
