//! All-point average precision.

/// One scored test sample for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub sample_id: String,
    pub score: f64,
    pub positive: bool,
}

/// Sorts by descending score, ties by ascending sample id.
pub fn rank(entries: &mut [Ranked]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
}

/// Precision and recall after each rank position.
pub fn pr_curve(entries: &[Ranked]) -> Vec<(f64, f64)> {
    let mut sorted = entries.to_vec();
    rank(&mut sorted);
    let total = sorted.iter().filter(|e| e.positive).count();
    let mut tp = 0usize;
    sorted
        .iter()
        .enumerate()
        .map(|(k, e)| {
            tp += e.positive as usize;
            (
                tp as f64 / (k + 1) as f64,
                if total == 0 { 0.0 } else { tp as f64 / total as f64 },
            )
        })
        .collect()
}

/// Area under the precision envelope. `None` without positives.
pub fn average_precision(entries: &[Ranked]) -> Option<f64> {
    let total = entries.iter().filter(|e| e.positive).count();
    if total == 0 {
        return None;
    }
    let curve = pr_curve(entries);
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    // walk from the bottom of the ranking: precision envelope is the
    // running max, and each positive adds one recall step
    let mut sorted = entries.to_vec();
    rank(&mut sorted);
    for (k, e) in sorted.iter().enumerate().rev() {
        envelope = envelope.max(curve[k].0);
        if e.positive {
            ap += envelope;
        }
    }
    Some(ap / total as f64)
}

/// Convenience form; ties break by position in the input.
pub fn average_precision_scores(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let entries: Vec<Ranked> = scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, l))| Ranked {
            sample_id: format!("{i:08}"),
            score: *s,
            positive: *l,
        })
        .collect();
    average_precision(&entries)
}

/// Unweighted mean of the defined values.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
