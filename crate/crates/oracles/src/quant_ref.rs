//! Direct-formula quantizer references: plain exp-and-normalize posterior,
//! linear-scan nearest neighbor, step-by-step residual encoding.

/// P(k) proportional to exp(-||z - b_k||^2 / (2 s2)), normalized by the
/// plain sum (no max subtraction).
pub fn sq_posterior_ref(z: &[f64], codes: &[Vec<f64>], s2: f64) -> Vec<f64> {
    let weights: Vec<f64> = codes
        .iter()
        .map(|b| {
            let d2: f64 = z.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum();
            (-d2 / (2.0 * s2)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Shannon entropy in nats of a probability vector.
pub fn entropy_ref(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Index of the nearest code by squared distance; ties go to the lowest
/// index via strict improvement.
pub fn nearest_ref(z: &[f64], codes: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for (k, b) in codes.iter().enumerate() {
        let d2: f64 = z.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum();
        if d2 < best_d2 {
            best_d2 = d2;
            best = k;
        }
    }
    best
}

/// Greedy residual encoding: pick the nearest code per stage, subtract it,
/// record the residual norm after each stage.
pub fn rq_ref(z: &[f64], books: &[Vec<Vec<f64>>]) -> (Vec<usize>, Vec<f64>) {
    let mut residual = z.to_vec();
    let mut picks = Vec::with_capacity(books.len());
    let mut norms = Vec::with_capacity(books.len());
    for book in books {
        let k = nearest_ref(&residual, book);
        picks.push(k);
        for (r, c) in residual.iter_mut().zip(&book[k]) {
            *r -= c;
        }
        norms.push(residual.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    (picks, norms)
}

/// exp(H) of the normalized histogram.
pub fn perplexity_ref(hist: &[f64]) -> f64 {
    let total: f64 = hist.iter().sum();
    let p: Vec<f64> = hist.iter().map(|h| h / total).collect();
    entropy_ref(&p).exp()
}
