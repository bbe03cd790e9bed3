//! Post-training metrics and image dumps. Evaluation always encodes with
//! argmax assignments and the stored observation variance, so repeated runs
//! on the same state are identical.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use hqvae_tensor::{Graph, Scalar, Tensor};

use crate::data::{eval_order, Dataset};
use crate::error::{Error, Result};
use crate::nn::{decode_codes, forward, sample_prior, SampleMode};
use crate::quant::perplexity;
use crate::train::TrainState;
use crate::config::Variant;

pub struct EvalReport {
    pub dataset: String,
    pub images: usize,
    /// Mean per-image RMSE, scaled by 100.
    pub rmse_x100: f64,
    pub ssim: f64,
    /// Codebook usage perplexity per layer over the whole split.
    pub perplexity: Vec<f64>,
    /// Trained quantizer variance over its initial value, per layer
    /// (empty for the deterministic baselines).
    pub s2_ratio: Vec<f64>,
    /// Mean per-site posterior entropy per layer, nats
    /// (empty for the deterministic baselines).
    pub mean_entropy: Vec<f64>,
    /// Latent capacity Sum_l d_l log2 K_l.
    pub bits: f64,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "dataset".to_string(),
            "images".to_string(),
            "rmse_x100".to_string(),
            "ssim".to_string(),
            "bits".to_string(),
        ];
        for l in 0..self.perplexity.len() {
            cols.push(format!("perp{l}"));
        }
        for l in 0..self.s2_ratio.len() {
            cols.push(format!("s2_ratio{l}"));
        }
        for l in 0..self.mean_entropy.len() {
            cols.push(format!("ent{l}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![
            self.dataset.clone(),
            self.images.to_string(),
            self.rmse_x100.to_string(),
            self.ssim.to_string(),
            self.bits.to_string(),
        ];
        vals.extend(self.perplexity.iter().map(|v| v.to_string()));
        vals.extend(self.s2_ratio.iter().map(|v| v.to_string()));
        vals.extend(self.mean_entropy.iter().map(|v| v.to_string()));
        vals.join(",")
    }
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5) between same-shape [C,H,W]
/// planes in [0,1], averaged over valid window positions and channels.
pub fn ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> Result<f64> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    if x.len() != c * h * w || y.len() != c * h * w {
        return Err(Error::config(format!(
            "ssim: {} and {} values for shape {c}x{h}x{w}",
            x.len(),
            y.len()
        )));
    }
    if h < WIN || w < WIN {
        return Err(Error::config(format!("ssim: image {h}x{w} smaller than the {WIN}x{WIN} window")));
    }
    let mut win = [0.0; WIN * WIN];
    let mid = (WIN / 2) as f64;
    let mut norm = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            let v = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
            win[i * WIN + j] = v;
            norm += v;
        }
    }
    for v in &mut win {
        *v /= norm;
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let ys = &y[ch * h * w..(ch + 1) * h * w];
        for oy in 0..=(h - WIN) {
            for ox in 0..=(w - WIN) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let wv = win[i * WIN + j];
                        let xv = xs[(oy + i) * w + ox + j];
                        let yv = ys[(oy + i) * w + ox + j];
                        mx += wv * xv;
                        my += wv * yv;
                        mxx += wv * xv * xv;
                        myy += wv * yv * yv;
                        mxy += wv * xv * yv;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Full deterministic evaluation of a trained state on one split.
pub fn evaluate<T: Scalar>(state: &mut TrainState<T>, split: &Dataset) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::config("evaluate on an empty split".to_string()));
    }
    let cfg = state.cfg.clone();
    let l_count = cfg.model.layer.len();
    let mut hist: Vec<Vec<f64>> = (0..l_count).map(|l| vec![0.0; cfg.model.layer[l].k]).collect();
    let mut ent_acc = vec![0.0; l_count];
    let mut rmse_acc = 0.0;
    let mut ssim_acc = 0.0;
    let (c, h, w) = (split.channels(), split.height(), split.width());
    let dim = (c * h * w) as f64;

    for batch in eval_order(split.len(), cfg.train.batch) {
        let x = split.batch_tensor::<T>(&batch)?;
        let mut g = Graph::new();
        let trace = forward(
            &mut g,
            &state.store,
            &cfg,
            &state.shape,
            x,
            &SampleMode::Eval,
            &mut state.rng,
            false,
        )?;
        for (l, lt) in trace.layers.iter().enumerate() {
            for &k in lt.idx.as_ref().expect("eval mode assigns codes") {
                hist[l][k as usize] += 1.0;
            }
            if let Some(e) = lt.entropy {
                ent_acc[l] += g.value(e).data()[0].to_f64();
            }
        }
        let xs = g.value(trace.x).data();
        let rs = g.value(trace.recon).data();
        let per_image = c * h * w;
        for bi in 0..batch.len() {
            let xi: Vec<f64> =
                xs[bi * per_image..(bi + 1) * per_image].iter().map(|v| v.to_f64()).collect();
            let ri: Vec<f64> =
                rs[bi * per_image..(bi + 1) * per_image].iter().map(|v| v.to_f64()).collect();
            let sq: f64 = xi.iter().zip(&ri).map(|(a, b)| (a - b) * (a - b)).sum();
            rmse_acc += (sq / dim).sqrt();
            let ri_clamped: Vec<f64> = ri.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            ssim_acc += ssim(&xi, &ri_clamped, c, h, w)?;
        }
    }

    let n = split.len() as f64;
    let perp = hist.iter().map(|h| perplexity(h)).collect::<Result<Vec<f64>>>()?;
    let (s2_ratio, mean_entropy) = if cfg.model.variant.is_stochastic() {
        let mut ratios = Vec::with_capacity(l_count);
        for l in 0..l_count {
            let name = format!("codebook/{}/log_s2", l + 1);
            let v = state.store.get(state.store.id(&name)?).data()[0].to_f64();
            ratios.push(v.exp() / cfg.model.s2_init);
        }
        let ents = (0..l_count)
            .map(|l| ent_acc[l] / (n * state.shape.sites(l) as f64))
            .collect();
        (ratios, ents)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(EvalReport {
        dataset: split.provenance.clone(),
        images: split.len(),
        rmse_x100: 100.0 * rmse_acc / n,
        ssim: ssim_acc / n,
        perplexity: perp,
        s2_ratio,
        mean_entropy,
        bits: cfg.bits(&state.shape),
    })
}

/// Whether code prefixes decode to meaningful images for this model:
/// residual chains truncate naturally, and progressive training teaches
/// the decoder to handle missing groups.
pub fn supports_prefix_decode(cfg: &crate::config::RunConfig) -> bool {
    cfg.model.progressive || matches!(cfg.model.variant, Variant::Rsqvae | Variant::Rqvae)
}

/// Per-layer prefix reconstructions for a batch, as value tensors.
pub fn prefix_reconstructions<T: Scalar>(
    state: &mut TrainState<T>,
    x: Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let cfg = state.cfg.clone();
    let mut g = Graph::new();
    let trace = forward(
        &mut g,
        &state.store,
        &cfg,
        &state.shape,
        x,
        &SampleMode::Eval,
        &mut state.rng,
        true,
    )?;
    Ok(trace.prefix_recons.iter().map(|&v| g.value(v).clone()).collect())
}

/// Writes a [C,H,W] image in [0,1] as an 8-bit PNG (RGB for 3 channels,
/// grayscale otherwise).
pub fn write_png(path: &Path, img: &[f64], c: usize, h: usize, w: usize) -> Result<()> {
    if img.len() != c * h * w {
        return Err(Error::config(format!(
            "write_png: {} values for shape {c}x{h}x{w}",
            img.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
    let plane = h * w;
    let channels = if c == 3 { 3 } else { 1 };
    let mut bytes = Vec::with_capacity(channels * plane);
    for px in 0..plane {
        for ch in 0..channels {
            let v = img[ch * plane + px].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    writer.write_image_data(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
    Ok(())
}

/// Writes per-layer prefix reconstructions and magnified deltas for the
/// first `count` images of the split, plus a per-layer prefix-MSE table.
pub fn progressive_dump<T: Scalar>(
    state: &mut TrainState<T>,
    split: &Dataset,
    count: usize,
    dir: &Path,
) -> Result<()> {
    if !supports_prefix_decode(&state.cfg) {
        return Err(Error::config(
            "prefix decoding needs a residual or progressively trained model".to_string(),
        ));
    }
    let count = count.min(split.len());
    if count == 0 {
        return Err(Error::config("progressive dump of zero images".to_string()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let idx: Vec<usize> = (0..count).collect();
    let x = split.batch_tensor::<T>(&idx)?;
    let prefixes = prefix_reconstructions(state, x.clone())?;
    let (c, h, w) = (split.channels(), split.height(), split.width());
    let per_image = c * h * w;
    let l_count = prefixes.len();

    let mut mse_table: Vec<Vec<f64>> = vec![Vec::new(); l_count];
    for i in 0..count {
        let xi: Vec<f64> =
            x.data()[i * per_image..(i + 1) * per_image].iter().map(|v| v.to_f64()).collect();
        write_png(&dir.join(format!("img{i:03}_input.png")), &xi, c, h, w)?;
        let mut prev: Option<Vec<f64>> = None;
        for (l, pref) in prefixes.iter().enumerate() {
            let pi: Vec<f64> =
                pref.data()[i * per_image..(i + 1) * per_image].iter().map(|v| v.to_f64()).collect();
            write_png(&dir.join(format!("img{i:03}_prefix{}.png", l + 1)), &pi, c, h, w)?;
            let delta: Vec<f64> = match &prev {
                None => pi.clone(),
                Some(p) => pi.iter().zip(p).map(|(a, b)| a - b).collect(),
            };
            let vis: Vec<f64> = if prev.is_none() {
                delta.clone()
            } else {
                delta.iter().map(|d| 0.5 + 2.0 * d).collect()
            };
            write_png(&dir.join(format!("img{i:03}_delta{}.png", l + 1)), &vis, c, h, w)?;
            let mse: f64 =
                xi.iter().zip(&pi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per_image as f64;
            mse_table[l].push(mse);
            prev = Some(pi);
        }
    }

    let path = dir.join("prefix_mse.csv");
    let mut out = String::from("layer,mean_mse\n");
    for (l, row) in mse_table.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        out.push_str(&format!("{},{}\n", l + 1, mean));
    }
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Decodes `count` uniform prior samples to PNGs under `dir`.
pub fn sample_to_dir<T: Scalar>(
    state: &mut TrainState<T>,
    count: usize,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    use rand::SeedableRng;
    if count == 0 {
        return Err(Error::config("sampling zero images".to_string()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = state.cfg.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_prior(&cfg, &state.shape, count, &mut rng);
    let mut g = Graph::new();
    let recon = decode_codes(&mut g, &state.store, &cfg, &state.shape, &idx, count)?;
    let vals = g.value(recon);
    let (c, h, w) = (state.shape.in_c, state.shape.in_h, state.shape.in_w);
    let per_image = c * h * w;
    for i in 0..count {
        let img: Vec<f64> =
            vals.data()[i * per_image..(i + 1) * per_image].iter().map(|v| v.to_f64()).collect();
        write_png(&dir.join(format!("sample{i:03}.png")), &img, c, h, w)?;
    }
    Ok(())
}
