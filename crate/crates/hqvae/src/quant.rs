//! Pure quantization math on plain tensors: stochastic posteriors, Gumbel
//! noise, deterministic nearest-neighbor and residual assignment, perplexity,
//! and the temperature schedule. The differentiable in-graph assembly lives
//! in the model module; these value-level forms serve evaluation and tests.

use hqvae_tensor::{Scalar, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// tau(t) = max(floor, exp(-decay * t)).
#[derive(Clone, Copy, Debug)]
pub struct TemperatureSchedule {
    pub floor: f64,
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        (-self.decay * step as f64).exp().max(self.floor)
    }
}

/// Assignment probabilities of the stochastic quantizer: row i holds
/// p(k) proportional to exp(-||feat_i - code_k||^2 / (2 s^2)), plus each
/// row's entropy in nats.
pub fn sq_posterior<T: Scalar>(
    feat: &Tensor<T>,
    codes: &Tensor<T>,
    s2: f64,
) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (s, d) = rows_cols(feat, "sq_posterior feature")?;
    let (k, dc) = rows_cols(codes, "sq_posterior codebook")?;
    if d != dc {
        return Err(Error::config(format!(
            "sq_posterior: feature dim {d} vs codebook dim {dc}"
        )));
    }
    if !(s2 > 0.0) {
        return Err(Error::config(format!("sq_posterior: s2 = {s2} must be positive")));
    }
    let mut probs = Tensor::<f64>::zeros(&[s, k]);
    let mut entropies = Vec::with_capacity(s);
    let mut logits = vec![0.0f64; k];
    for i in 0..s {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = -sq_dist_row(feat, i, codes, j, d) / (2.0 * s2);
        }
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z += *l;
        }
        let row = &mut probs.data_mut()[i * k..(i + 1) * k];
        let mut h = 0.0;
        for (slot, &e) in row.iter_mut().zip(logits.iter()) {
            let p = e / z;
            *slot = p;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        entropies.push(h);
    }
    Ok((probs, entropies))
}

/// Nearest code per feature row; ties break to the lowest index.
pub fn vq_nearest<T: Scalar>(feat: &Tensor<T>, codes: &Tensor<T>) -> Result<Vec<u32>> {
    let (s, d) = rows_cols(feat, "vq_nearest feature")?;
    let (k, dc) = rows_cols(codes, "vq_nearest codebook")?;
    if d != dc {
        return Err(Error::config(format!("vq_nearest: feature dim {d} vs codebook dim {dc}")));
    }
    if k == 0 {
        return Err(Error::config("vq_nearest: empty codebook"));
    }
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let dist = sq_dist_row(feat, i, codes, j, d);
            if dist < best_d {
                best_d = dist;
                best = j as u32;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Residual assignment: greedily approximate each feature row as a sum of one
/// code per layer. Returns the per-layer indices and the Frobenius norm of
/// the residual after each layer (starting with the final one at index L-1).
pub fn rq_encode<T: Scalar>(
    feat: &Tensor<T>,
    codebooks: &[&Tensor<T>],
) -> Result<(Vec<Vec<u32>>, Vec<f64>)> {
    let (s, d) = rows_cols(feat, "rq_encode feature")?;
    let mut residual = Tensor::<f64>::from_f64_slice(feat.dims(), &feat.iter_f64().collect::<Vec<_>>())?;
    let mut layers = Vec::with_capacity(codebooks.len());
    let mut norms = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let cb64 = Tensor::<f64>::from_f64_slice(cb.dims(), &cb.iter_f64().collect::<Vec<_>>())?;
        let idx = vq_nearest(&residual, &cb64)?;
        for i in 0..s {
            let k = idx[i] as usize;
            for t in 0..d {
                residual.data_mut()[i * d + t] -= cb64.data()[k * d + t];
            }
        }
        norms.push(residual.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        layers.push(idx);
    }
    Ok((layers, norms))
}

/// exp of the Shannon entropy (nats) of a normalized usage histogram.
pub fn perplexity(hist: &[f64]) -> Result<f64> {
    let total: f64 = hist.iter().sum();
    if hist.is_empty() || !(total > 0.0) || hist.iter().any(|&c| c < 0.0) {
        return Err(Error::config("perplexity needs a nonnegative histogram with positive mass"));
    }
    let mut h = 0.0;
    for &c in hist {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    Ok(h.exp())
}

/// Standard-Gumbel noise matrix; draws are f64 and converted, so the stream
/// is identical across precisions.
pub fn gumbel_matrix<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::<T>::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = T::from_f64(gumbel_draw(rng));
    }
    t
}

fn gumbel_draw<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u32>> {
    let (s, k) = rows_cols(t, "argmax_rows")?;
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let row = &t.data()[i * k..(i + 1) * k];
        let mut best = 0u32;
        let mut best_v = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            let x = v.to_f64();
            if x > best_v {
                best_v = x;
                best = j as u32;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Stochastic dequantization: codes plus isotropic Gaussian noise of
/// variance s2. Used by distribution-level tests; training follows the
/// noiseless identification of the auxiliary variable with the encoding.
pub fn dequantize<T: Scalar, R: Rng>(codes: &Tensor<T>, s2: f64, rng: &mut R) -> Tensor<T> {
    let s = s2.sqrt();
    let mut out = codes.clone();
    for v in out.data_mut() {
        *v = *v + T::from_f64(s * normal_draw(rng));
    }
    out
}

pub fn normal_draw<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; consumes exactly two uniforms per draw for replayability
    let u1: f64 = rng.random::<f64>().clamp(1e-12, 1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn rows_cols<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::config(format!("{what}: expected a matrix, got {other:?}"))),
    }
}

fn sq_dist_row<A: Scalar, B: Scalar>(
    a: &Tensor<A>,
    i: usize,
    b: &Tensor<B>,
    j: usize,
    d: usize,
) -> f64 {
    let mut acc = 0.0;
    for t in 0..d {
        let diff = a.data()[i * d + t].to_f64() - b.data()[j * d + t].to_f64();
        acc += diff * diff;
    }
    acc
}
