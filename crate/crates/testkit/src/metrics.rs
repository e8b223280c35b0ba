//! Accuracy computed through an explicit confusion matrix.

/// `matrix[truth][predicted]` counts.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Mean over classes that appear in `truth` of the diagonal share of each row.
pub fn mean_per_class_accuracy(truth: &[usize], predicted: &[usize], classes: usize) -> f64 {
    let m = confusion_matrix(truth, predicted, classes);
    let mut total = 0.0;
    let mut present = 0usize;
    for (c, row) in m.iter().enumerate() {
        let support: usize = row.iter().sum();
        if support > 0 {
            total += row[c] as f64 / support as f64;
            present += 1;
        }
    }
    total / present as f64
}
