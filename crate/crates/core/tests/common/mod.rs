//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Direct-summation cross-attention: `(z_video, weights)` with explicit
/// loops and a plain exp/sum softmax.
pub fn oracle_aggregate(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    scaled: bool,
) -> (Vec<f64>, Vec<f64>) {
    let d = q.len();
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        let mut dot = 0.0;
        for i in 0..d {
            dot += q[i] * k[i];
        }
        if scaled {
            dot /= (d as f64).sqrt();
        }
        logits.push(dot);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(logits.len());
    for l in &logits {
        let e = (l - m).exp();
        weights.push(e);
        total += e;
    }
    for w in &mut weights {
        *w /= total;
    }
    let dv = values[0].len();
    let mut z = vec![0.0; dv];
    for (t, v) in values.iter().enumerate() {
        for j in 0..dv {
            z[j] += weights[t] * v[j];
        }
    }
    (z, weights)
}

/// AUC by counting every positive/negative pair; ties score one half.
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// `(F1, Acc)` from confusion counts.
pub fn confusion_f1_acc(pred: &[u8], truth: &[u8]) -> (f64, f64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 0) => tn += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let denom = 2.0 * tp + fp + fn_;
    let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    (f1, (tp + tn) / pred.len() as f64)
}
