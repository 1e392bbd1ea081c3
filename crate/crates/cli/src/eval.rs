//! Part quality against generator ground truth.

/// Mean IoU over foreground labels `1..=max_label` under the best injective
/// assignment of labels to predicted parts. `None` when the ground truth has
/// no foreground.
pub fn foreground_iou(pred: &[usize], parts: usize, truth: &[usize]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    let labels = truth.iter().copied().max().unwrap_or(0);
    if labels == 0 {
        return None;
    }
    // iou[j][p]: IoU of ground-truth label j+1 with predicted part p
    let iou: Vec<Vec<f64>> = (1..=labels)
        .map(|j| {
            (0..parts)
                .map(|p| {
                    let (mut inter, mut union) = (0usize, 0usize);
                    for (&a, &b) in pred.iter().zip(truth) {
                        let (in_p, in_j) = (a == p, b == j);
                        inter += (in_p && in_j) as usize;
                        union += (in_p || in_j) as usize;
                    }
                    if union == 0 {
                        0.0
                    } else {
                        inter as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut used = vec![false; parts];
    Some(best_assignment(&iou, 0, &mut used) / labels as f64)
}

/// Exhaustive search; label counts here are single digits.
fn best_assignment(iou: &[Vec<f64>], label: usize, used: &mut [bool]) -> f64 {
    if label == iou.len() {
        return 0.0;
    }
    // leaving a label unmatched scores zero for it
    let mut best = best_assignment(iou, label + 1, used);
    for p in 0..used.len() {
        if !used[p] {
            used[p] = true;
            best = best.max(iou[label][p] + best_assignment(iou, label + 1, used));
            used[p] = false;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_under_relabelling() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [2, 2, 0, 0, 1, 1];
        assert_eq!(foreground_iou(&pred, 3, &truth), Some(1.0));
    }

    #[test]
    fn partial_overlap() {
        let truth = [0, 1, 1, 2];
        let pred = [1, 1, 1, 0];
        // label 1 -> part 1: 2/3; label 2 -> part 0: 1
        let v = foreground_iou(&pred, 2, &truth).unwrap();
        assert!((v - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn more_labels_than_parts() {
        let truth = [1, 2, 3];
        let pred = [0, 0, 1];
        let v = foreground_iou(&pred, 2, &truth).unwrap();
        assert!((v - (0.5 + 1.0) / 3.0).abs() < 1e-15);
        assert_eq!(foreground_iou(&[0, 1], 2, &[0, 0]), None);
    }
}
