//! Objective assembly. All variants share the reconstruction plumbing and
//! differ in how code-assignment terms enter: per-group gaps with pooled
//! variances, per-layer gaps with individual variances, or straight-through
//! commitment penalties. Observation variance is not a graph parameter; it
//! is refit in closed form from the current batch and enters as a constant.

use hqvae_tensor::{Graph, Scalar, Var};

use crate::config::{RunConfig, Shape};
use crate::error::{Error, Result};
use crate::nn::ForwardTrace;

pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Per-term diagnostic values alongside the differentiable total.
pub struct LossParts {
    pub total: Var,
    pub value: f64,
    /// Squared reconstruction errors, one per decoded output
    /// (several under progressive coding).
    pub recon_sq: Vec<f64>,
    /// Raw gap sums, per group (grouped objectives) or per layer (naive).
    pub gap: Vec<f64>,
    /// Posterior entropy sums per layer (stochastic variants).
    pub entropy: Vec<f64>,
    /// Commitment sums per layer (baselines).
    pub commit: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Quantizer variances per layer (stochastic variants).
    pub s2: Vec<f64>,
}

impl LossParts {
    /// Names the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        for (i, v) in self.recon_sq.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("recon[{i}]"));
            }
        }
        for (i, v) in self.gap.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("gap[{i}]"));
            }
        }
        for (i, v) in self.entropy.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("entropy[{i}]"));
            }
        }
        for (i, v) in self.commit.iter().enumerate() {
            if !v.is_finite() {
                return Some(format!("commit[{i}]"));
            }
        }
        for (i, v) in self.s2.iter().enumerate() {
            if !v.is_finite() || *v <= 0.0 {
                return Some(format!("s2[{i}]"));
            }
        }
        if !self.value.is_finite() {
            return Some("total".into());
        }
        None
    }
}

/// Number of observation-variance slots the variant maintains.
pub fn sigma2_slots(cfg: &RunConfig, shape: &Shape) -> usize {
    if !cfg.model.variant.is_stochastic() {
        0
    } else if cfg.model.progressive {
        shape.groups.len()
    } else {
        1
    }
}

fn sum_sq<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum_all(sq))
}

fn scalar_val<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64()
}

/// Builds the training objective for the configured variant from a forward
/// trace, refitting `sigma2` in place when requested (training steps refit,
/// validation and evaluation reuse the stored values).
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &RunConfig,
    shape: &Shape,
    trace: &ForwardTrace,
    sigma2: &mut [f64],
    refit_sigma2: bool,
) -> Result<LossParts> {
    let n = trace.batch as f64;
    let d = shape.input_dim() as f64;
    let inv_n = 1.0 / n;
    let mut parts = LossParts {
        total: trace.recon,
        value: 0.0,
        recon_sq: Vec::new(),
        gap: Vec::new(),
        entropy: Vec::new(),
        commit: Vec::new(),
        sigma2: Vec::new(),
        s2: Vec::new(),
    };
    let mut total: Option<Var> = None;
    let push = |g: &mut Graph<T>, total: &mut Option<Var>, term: Var| -> Result<()> {
        *total = Some(match *total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
        Ok(())
    };

    if cfg.model.variant.is_stochastic() {
        // reconstruction terms: one per decoded output
        let recon_vars: Vec<Var> = if cfg.model.progressive {
            if trace.prefix_recons.len() != shape.num_layers() {
                return Err(Error::config(
                    "progressive objective requires prefix reconstructions".to_string(),
                ));
            }
            shape.groups.iter().map(|gr| trace.prefix_recons[gr.layers.end - 1]).collect()
        } else {
            vec![trace.recon]
        };
        debug_assert_eq!(recon_vars.len(), sigma2.len());
        for (r, &rv) in recon_vars.iter().enumerate() {
            let sq = sum_sq(g, trace.x, rv)?;
            let sqv = scalar_val(g, sq);
            if refit_sigma2 {
                sigma2[r] = (sqv / (n * d)).max(SIGMA2_FLOOR);
                if r > 0 {
                    // coarser prefixes may not claim lower noise
                    sigma2[r] = sigma2[r].min(sigma2[r - 1]);
                }
            }
            let term = g.scale(sq, inv_n / (2.0 * sigma2[r]));
            push(g, &mut total, term)?;
            let log_term = g.scalar_const(0.5 * d * sigma2[r].ln());
            push(g, &mut total, log_term)?;
            parts.recon_sq.push(sqv);
            parts.sigma2.push(sigma2[r]);
        }

        // code-assignment gaps
        if cfg.model.naive_objective {
            for lt in &trace.layers {
                let sq = sum_sq(g, lt.zhat, lt.z)?;
                let s2 = lt.s2.expect("stochastic layer carries s2");
                let denom = g.scale(s2, 2.0);
                let inv = g.recip(denom);
                let weighted = g.mul(sq, inv)?;
                let term = g.scale(weighted, inv_n);
                push(g, &mut total, term)?;
                parts.gap.push(scalar_val(g, sq));
            }
        } else {
            for gt in &trace.groups {
                let sq = sum_sq(g, gt.target, gt.y_sites)?;
                let mut s2_sum: Option<Var> = None;
                for l in gt.layers.clone() {
                    let s2 = trace.layers[l].s2.expect("stochastic layer carries s2");
                    s2_sum = Some(match s2_sum {
                        None => s2,
                        Some(acc) => g.add(acc, s2)?,
                    });
                }
                let denom = g.scale(s2_sum.expect("nonempty group"), 2.0);
                let inv = g.recip(denom);
                let weighted = g.mul(sq, inv)?;
                let term = g.scale(weighted, inv_n);
                push(g, &mut total, term)?;
                parts.gap.push(scalar_val(g, sq));
            }
        }

        // entropy bonus
        for lt in &trace.layers {
            let h = lt.entropy.expect("stochastic layer carries entropy");
            let term = g.scale(h, -inv_n);
            push(g, &mut total, term)?;
            parts.entropy.push(scalar_val(g, h));
            parts.s2.push(scalar_val(g, lt.s2.expect("stochastic layer carries s2")));
        }
    } else {
        let sq = sum_sq(g, trace.x, trace.recon)?;
        parts.recon_sq.push(scalar_val(g, sq));
        let term = g.scale(sq, inv_n);
        push(g, &mut total, term)?;
        for lt in &trace.layers {
            let c = lt.commit_sq.expect("baseline layer carries commitment");
            let term = g.scale(c, cfg.model.beta * inv_n);
            push(g, &mut total, term)?;
            parts.commit.push(scalar_val(g, c));
        }
    }

    let total = total.expect("objective has at least one term");
    parts.total = total;
    parts.value = scalar_val(g, total);
    Ok(parts)
}

/// Maps a non-finite term to the abort error for `step`.
pub fn check_finite(parts: &LossParts, step: u64) -> Result<()> {
    match parts.non_finite_term() {
        Some(term) => Err(Error::Numeric { step, term }),
        None => Ok(()),
    }
}

/// Per-layer exponential-moving-average codebook statistics for the
/// straight-through baselines; keyed like the parameter store, so layers
/// sharing a codebook share one accumulator.
pub struct EmaState {
    /// (codebook name, counts [K], sums [K * d]) per distinct codebook.
    pub(crate) books: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl EmaState {
    pub fn new<T: Scalar>(
        cfg: &RunConfig,
        store: &hqvae_tensor::ParamStore<T>,
    ) -> Result<EmaState> {
        let mut books = Vec::new();
        for l in 0..cfg.model.layer.len() {
            let name = crate::nn::codebook_name(cfg, l);
            if books.iter().any(|(n, _, _)| *n == name) {
                continue;
            }
            let t = store.get(store.id(&name)?);
            let (k, d) = (t.dims()[0], t.dims()[1]);
            let mut sums = vec![0.0; k * d];
            for (s, v) in sums.iter_mut().zip(t.data()) {
                *s = v.to_f64();
            }
            books.push((name, vec![1.0; k], sums));
        }
        Ok(EmaState { books })
    }

    pub fn counts(&self, name: &str) -> Option<&[f64]> {
        self.books.iter().find(|(n, _, _)| n == name).map(|(_, c, _)| c.as_slice())
    }

    /// One decay step: fold this batch's assignments and assigned features
    /// into the running statistics, then rewrite the codebooks as the ratio.
    pub fn update<T: Scalar>(
        &mut self,
        cfg: &RunConfig,
        store: &mut hqvae_tensor::ParamStore<T>,
        assignments: &[(usize, Vec<u32>, Vec<f64>)],
    ) -> Result<()> {
        let gamma = cfg.model.ema_decay;
        for (name, counts, sums) in &mut self.books {
            let d = sums.len() / counts.len();
            let mut batch_counts = vec![0.0; counts.len()];
            let mut batch_sums = vec![0.0; sums.len()];
            let mut touched = false;
            for (l, idx, feats) in assignments {
                if crate::nn::codebook_name(cfg, *l) != *name {
                    continue;
                }
                touched = true;
                for (site, &k) in idx.iter().enumerate() {
                    batch_counts[k as usize] += 1.0;
                    let row = &feats[site * d..(site + 1) * d];
                    let acc = &mut batch_sums[k as usize * d..(k as usize + 1) * d];
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            if !touched {
                continue;
            }
            for (c, bc) in counts.iter_mut().zip(&batch_counts) {
                *c = gamma * *c + (1.0 - gamma) * bc;
            }
            for (s, bs) in sums.iter_mut().zip(&batch_sums) {
                *s = gamma * *s + (1.0 - gamma) * bs;
            }
            let pid = store.id(name)?;
            let t = store.get_mut(pid);
            for (row, (c, srow)) in counts.iter().zip(sums.chunks(d)).enumerate() {
                for (j, v) in srow.iter().enumerate() {
                    t.data_mut()[row * d + j] = T::from_f64(v / c);
                }
            }
        }
        Ok(())
    }

    /// Re-seeds codes whose running count fell below the threshold from
    /// random quantizer-input rows of the layers feeding that codebook.
    pub fn reset_dead_codes<T: Scalar>(
        &mut self,
        cfg: &RunConfig,
        store: &mut hqvae_tensor::ParamStore<T>,
        assignments: &[(usize, Vec<u32>, Vec<f64>)],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<usize> {
        use rand::Rng;
        let mut resets = 0;
        for (name, counts, sums) in &mut self.books {
            let d = sums.len() / counts.len();
            let feeders: Vec<&Vec<f64>> = assignments
                .iter()
                .filter(|(l, _, _)| crate::nn::codebook_name(cfg, *l) == *name)
                .map(|(_, _, feats)| feats)
                .collect();
            let rows: usize = feeders.iter().map(|f| f.len() / d).sum();
            if rows == 0 {
                continue;
            }
            let pid = store.id(name)?;
            let t = store.get_mut(pid);
            for k in 0..counts.len() {
                if counts[k] >= cfg.model.reset_threshold {
                    continue;
                }
                let mut pick = rng.random_range(0..rows);
                let mut row: &[f64] = &[];
                for f in &feeders {
                    let fr = f.len() / d;
                    if pick < fr {
                        row = &f[pick * d..(pick + 1) * d];
                        break;
                    }
                    pick -= fr;
                }
                for j in 0..d {
                    t.data_mut()[k * d + j] = T::from_f64(row[j]);
                    sums[k * d + j] = row[j];
                }
                counts[k] = 1.0;
                resets += 1;
            }
        }
        Ok(resets)
    }
}
