//! Training loop: Adam with heavy second-moment decay, temperature
//! annealing per step, learning-rate halving on validation plateaus, and
//! byte-deterministic checkpointing.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hqvae_tensor::{
    read_archive_file, write_archive_file, ArchiveEntry, Graph, Grads, ParamId, ParamStore,
    Scalar, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig, Shape};
use crate::data::{epoch_order, eval_order, Splits};
use crate::error::{Error, Result};
use crate::loss::{build_loss, check_finite, sigma2_slots, EmaState, LossParts};
use crate::nn::{forward, init_params, SampleMode};
use crate::quant::{perplexity, TemperatureSchedule};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.9;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(store: &ParamStore<T>) -> AdamState<T> {
        let shapes: Vec<Vec<usize>> =
            store.iter().map(|(_, _, t)| t.dims().to_vec()).collect();
        AdamState {
            step: 0,
            m: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            v: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
        }
    }
}

/// One Adam update with bias correction; `grad_scale` folds in gradient
/// clipping. Slots without gradients decay their moments and still move.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Grads<T>,
    opt: &mut AdamState<T>,
    lr: f64,
    grad_scale: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one_b1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_b2 = T::from_f64(1.0 - ADAM_BETA2);
    let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
    let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);
    let gs = T::from_f64(grad_scale);
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let slot = id.index();
        let g = grads.get(id);
        let m = opt.m[slot].data_mut();
        let v = opt.v[slot].data_mut();
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = match g {
                Some(t) => t.data()[i] * gs,
                None => T::ZERO,
            };
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
}

pub struct TrainState<T: Scalar> {
    pub cfg: RunConfig,
    pub shape: Shape,
    pub store: ParamStore<T>,
    pub opt: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub sigma2: Vec<f64>,
    pub lr: f64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: u64,
    pub best_val: f64,
    /// Epochs since the validation loss last improved.
    pub stall: usize,
    pub ema: Option<EmaState>,
}

pub fn init_state<T: Scalar>(cfg: &RunConfig) -> Result<TrainState<T>> {
    let shape = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let store = init_params::<T>(cfg, &shape, &mut rng)?;
    let opt = AdamState::zeros(&store);
    let slots = sigma2_slots(cfg, &shape);
    let ema = if cfg.model.variant.is_stochastic() {
        None
    } else {
        Some(EmaState::new(cfg, &store)?)
    };
    Ok(TrainState {
        cfg: cfg.clone(),
        shape,
        store,
        opt,
        rng,
        sigma2: vec![cfg.model.sigma2_init; slots],
        lr: cfg.train.lr,
        epoch: 0,
        step: 0,
        best_val: f64::INFINITY,
        stall: 0,
        ema,
    })
}

fn grad_global_norm<T: Scalar>(store: &ParamStore<T>, grads: &Grads<T>) -> f64 {
    let mut acc = 0.0;
    for (id, _, _) in store.iter() {
        if let Some(g) = grads.get(id) {
            for v in g.data() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
    }
    acc.sqrt()
}

/// Forward + objective for one batch; shared by training and validation.
fn batch_loss<T: Scalar>(
    state: &mut TrainState<T>,
    x: Tensor<T>,
    mode: &SampleMode<'_>,
    refit_sigma2: bool,
) -> Result<(Graph<T>, crate::nn::ForwardTrace, LossParts)> {
    let mut g = Graph::new();
    let want_prefixes = state.cfg.model.progressive;
    let trace = forward(
        &mut g,
        &state.store,
        &state.cfg,
        &state.shape,
        x,
        mode,
        &mut state.rng,
        want_prefixes,
    )?;
    let parts =
        build_loss(&mut g, &state.cfg, &state.shape, &trace, &mut state.sigma2, refit_sigma2)?;
    Ok((g, trace, parts))
}

/// One optimization step on a batch; returns the loss diagnostics.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, x: Tensor<T>) -> Result<LossParts> {
    let schedule =
        TemperatureSchedule { floor: state.cfg.train.tau_floor, decay: state.cfg.train.tau_decay };
    let tau = schedule.at(state.step);
    let stochastic = state.cfg.model.variant.is_stochastic();
    let mode = if stochastic { SampleMode::Relaxed { tau } } else { SampleMode::Eval };
    let (g, trace, parts) = batch_loss(state, x, &mode, true)?;
    check_finite(&parts, state.step)?;
    let grads = g.backward(parts.total, &state.store)?;

    let clip = state.cfg.train.clip_norm;
    let grad_scale = if clip > 0.0 {
        let norm = grad_global_norm(&state.store, &grads);
        if norm > clip {
            clip / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    adam_step(&mut state.store, &grads, &mut state.opt, state.lr, grad_scale);

    if let Some(ema) = state.ema.as_mut() {
        let assignments: Vec<(usize, Vec<u32>, Vec<f64>)> = trace
            .layers
            .iter()
            .enumerate()
            .map(|(l, lt)| {
                let idx = lt.idx.clone().expect("baseline layers carry assignments");
                let feats: Vec<f64> = g.value(lt.zhat).data().iter().map(|v| v.to_f64()).collect();
                (l, idx, feats)
            })
            .collect();
        ema.update(&state.cfg, &mut state.store, &assignments)?;
        if state.cfg.model.codebook_reset {
            ema.reset_dead_codes(&state.cfg, &mut state.store, &assignments, &mut state.rng)?;
        }
    }
    state.step += 1;
    Ok(parts)
}

pub struct ValReport {
    pub loss: f64,
    /// Assignment histograms per layer over the whole split.
    pub hist: Vec<Vec<f64>>,
    pub perplexity: Vec<f64>,
}

/// Deterministic pass over a split: argmax assignments, stored observation
/// variance, no parameter movement.
pub fn validate_pass<T: Scalar>(state: &mut TrainState<T>, split: &crate::data::Dataset) -> Result<ValReport> {
    if split.is_empty() {
        return Err(Error::config("validation on an empty split".to_string()));
    }
    let l_count = state.cfg.model.layer.len();
    let mut hist: Vec<Vec<f64>> =
        (0..l_count).map(|l| vec![0.0; state.cfg.model.layer[l].k]).collect();
    let mut loss_acc = 0.0;
    let mut n_acc = 0usize;
    for batch in eval_order(split.len(), state.cfg.train.batch) {
        let x = split.batch_tensor::<T>(&batch)?;
        let (_g, trace, parts) = batch_loss(state, x, &SampleMode::Eval, false)?;
        for (l, lt) in trace.layers.iter().enumerate() {
            for &k in lt.idx.as_ref().expect("eval mode assigns codes") {
                hist[l][k as usize] += 1.0;
            }
        }
        loss_acc += parts.value * batch.len() as f64;
        n_acc += batch.len();
    }
    let loss = loss_acc / n_acc as f64;
    let perp = hist.iter().map(|h| perplexity(h)).collect::<Result<Vec<f64>>>()?;
    Ok(ValReport { loss, hist, perplexity: perp })
}

fn fmt_row(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

struct MetricsLog {
    metrics: Option<BufWriter<File>>,
    val: Option<BufWriter<File>>,
}

impl MetricsLog {
    fn open(cfg: &RunConfig, shape: &Shape, dir: Option<&Path>, fresh: bool) -> Result<MetricsLog> {
        let Some(dir) = dir else { return Ok(MetricsLog { metrics: None, val: None }) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |path: &PathBuf| -> Result<BufWriter<File>> {
            let f = if fresh {
                File::create(path)
            } else {
                OpenOptions::new().create(true).append(true).open(path)
            };
            Ok(BufWriter::new(f.map_err(|e| Error::io(path, e))?))
        };
        let mpath = dir.join("metrics.csv");
        let vpath = dir.join("val.csv");
        let write_header = fresh || std::fs::metadata(&mpath).map(|m| m.len() == 0).unwrap_or(true);
        let mut metrics = open(&mpath)?;
        let mut val = open(&vpath)?;
        if write_header {
            let l_count = cfg.model.layer.len();
            let mut cols = vec![
                "step".to_string(),
                "epoch".to_string(),
                "lr".to_string(),
                "tau".to_string(),
                "loss".to_string(),
            ];
            if cfg.model.variant.is_stochastic() {
                for r in 0..sigma2_slots(cfg, shape) {
                    cols.push(format!("recon{r}"));
                    cols.push(format!("sigma2_{r}"));
                }
                let gaps = if cfg.model.naive_objective { l_count } else { shape.groups.len() };
                for i in 0..gaps {
                    cols.push(format!("gap{i}"));
                }
                for l in 0..l_count {
                    cols.push(format!("ent{l}"));
                    cols.push(format!("s2_{l}"));
                }
            } else {
                cols.push("recon0".to_string());
                for l in 0..l_count {
                    cols.push(format!("commit{l}"));
                }
            }
            writeln!(metrics, "# schema=hqvae.metrics.v1").map_err(|e| Error::io(&mpath, e))?;
            writeln!(metrics, "{}", cols.join(",")).map_err(|e| Error::io(&mpath, e))?;
            let mut vcols =
                vec!["epoch".to_string(), "step".to_string(), "loss".to_string(), "lr".to_string()];
            for l in 0..l_count {
                vcols.push(format!("perp{l}"));
            }
            writeln!(val, "# schema=hqvae.val.v1").map_err(|e| Error::io(&vpath, e))?;
            writeln!(val, "{}", vcols.join(",")).map_err(|e| Error::io(&vpath, e))?;
        }
        Ok(MetricsLog { metrics: Some(metrics), val: Some(val) })
    }

    fn step_row<T: Scalar>(
        &mut self,
        state: &TrainState<T>,
        tau: f64,
        parts: &LossParts,
    ) -> Result<()> {
        let Some(w) = self.metrics.as_mut() else { return Ok(()) };
        let mut vals = vec![
            state.step as f64 - 1.0,
            state.epoch as f64,
            state.lr,
            tau,
            parts.value,
        ];
        if state.cfg.model.variant.is_stochastic() {
            for (r, sq) in parts.recon_sq.iter().enumerate() {
                vals.push(*sq);
                vals.push(parts.sigma2[r]);
            }
            vals.extend(parts.gap.iter());
            let n = state.cfg.train.batch as f64;
            for (l, h) in parts.entropy.iter().enumerate() {
                let sites = state.shape.sites(l) as f64 * n;
                vals.push(h / sites);
                vals.push(parts.s2[l]);
            }
        } else {
            vals.push(parts.recon_sq[0]);
            vals.extend(parts.commit.iter());
        }
        writeln!(w, "{}", fmt_row(&vals))
            .map_err(|e| Error::io(PathBuf::from("metrics.csv"), e))?;
        Ok(())
    }

    fn val_row<T: Scalar>(&mut self, state: &TrainState<T>, report: &ValReport) -> Result<()> {
        let Some(w) = self.val.as_mut() else { return Ok(()) };
        let mut vals =
            vec![state.epoch as f64, state.step as f64, report.loss, state.lr];
        vals.extend(report.perplexity.iter());
        writeln!(w, "{}", fmt_row(&vals)).map_err(|e| Error::io(PathBuf::from("val.csv"), e))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.flush().map_err(|e| Error::io(PathBuf::from("metrics.csv"), e))?;
        }
        if let Some(w) = self.val.as_mut() {
            w.flush().map_err(|e| Error::io(PathBuf::from("val.csv"), e))?;
        }
        Ok(())
    }
}

/// Plateau rule: an epoch that fails to improve the best validation loss
/// counts as a stall, and `patience` consecutive stalls halve the rate.
pub fn note_val_loss<T: Scalar>(state: &mut TrainState<T>, loss: f64) {
    if loss < state.best_val {
        state.best_val = loss;
        state.stall = 0;
    } else {
        state.stall += 1;
        if state.stall >= state.cfg.train.patience {
            state.lr *= 0.5;
            state.stall = 0;
        }
    }
}

/// Runs the remaining epochs. `dir`, when given, receives metrics.csv,
/// val.csv, and checkpoints/. Returns the per-epoch validation losses of
/// this call.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    splits: &Splits,
    dir: Option<&Path>,
) -> Result<Vec<f64>> {
    let fresh = state.epoch == 0 && state.step == 0;
    let mut log = MetricsLog::open(&state.cfg, &state.shape, dir, fresh)?;
    let schedule =
        TemperatureSchedule { floor: state.cfg.train.tau_floor, decay: state.cfg.train.tau_decay };
    let mut val_losses = Vec::new();

    while state.epoch < state.cfg.train.epochs {
        let order =
            epoch_order(splits.train.len(), state.cfg.train.batch, state.cfg.seed, state.epoch);
        if order.is_empty() {
            return Err(Error::config(format!(
                "training split of {} images yields no full batches of {}",
                splits.train.len(),
                state.cfg.train.batch
            )));
        }
        for batch in &order {
            let x = splits.train.batch_tensor::<T>(batch)?;
            let tau = schedule.at(state.step);
            let parts = train_step(state, x)?;
            log.step_row(state, tau, &parts)?;
        }
        state.epoch += 1;

        let report = validate_pass(state, &splits.val)?;
        log.val_row(state, &report)?;
        val_losses.push(report.loss);
        note_val_loss(state, report.loss);

        if let Some(dir) = dir {
            let every = state.cfg.train.checkpoint_every;
            if every > 0 && state.epoch % every == 0 && state.epoch < state.cfg.train.epochs {
                let ckdir = dir.join("checkpoints");
                std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
                save_checkpoint(state, &ckdir.join(format!("epoch{:04}.ckpt", state.epoch)))?;
            }
        }
    }

    if let Some(dir) = dir {
        let ckdir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        save_checkpoint(state, &ckdir.join("final.ckpt"))?;
    }
    log.flush()?;
    Ok(val_losses)
}

/// Run precision implied by the scalar type.
pub fn precision_of<T: Scalar>() -> Precision {
    match T::DTYPE {
        hqvae_tensor::Dtype::F32 => Precision::F32,
        _ => Precision::F64,
    }
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    entries.push(ArchiveEntry::bytes("config", state.cfg.canonical_toml().into_bytes()));
    let precision = match precision_of::<T>() {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    entries.push(ArchiveEntry::bytes("train/precision", precision.as_bytes().to_vec()));
    for (_, name, t) in state.store.iter() {
        entries.push(ArchiveEntry::from_tensor(&format!("param/{name}"), t));
    }
    for (id, name, _) in state.store.iter() {
        entries.push(ArchiveEntry::from_tensor(
            &format!("adam/m/{name}"),
            &state.opt.m[id.index()],
        ));
        entries.push(ArchiveEntry::from_tensor(
            &format!("adam/v/{name}"),
            &state.opt.v[id.index()],
        ));
    }
    entries.push(ArchiveEntry::i64s("opt/step", vec![state.opt.step as i64]));
    entries.push(ArchiveEntry::scalar_f64("train/lr", state.lr));
    entries.push(ArchiveEntry::i64s(
        "train/progress",
        vec![state.epoch as i64, state.step as i64, state.stall as i64],
    ));
    entries.push(ArchiveEntry::scalar_f64("train/best_val", state.best_val));
    entries.push(ArchiveEntry::from_tensor(
        "train/sigma2",
        &Tensor::<f64>::from_vec(&[state.sigma2.len()], state.sigma2.clone())?,
    ));
    entries
        .push(ArchiveEntry::bytes("rng/word_pos", state.rng.get_word_pos().to_le_bytes().to_vec()));
    if let Some(ema) = &state.ema {
        for (name, counts, sums) in &ema.books {
            entries.push(ArchiveEntry::from_tensor(
                &format!("ema/{name}/counts"),
                &Tensor::<f64>::from_vec(&[counts.len()], counts.clone())?,
            ));
            entries.push(ArchiveEntry::from_tensor(
                &format!("ema/{name}/sums"),
                &Tensor::<f64>::from_vec(&[sums.len()], sums.clone())?,
            ));
        }
    }
    write_archive_file(path, &entries)?;
    Ok(())
}

/// Reads just the config text out of a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<(RunConfig, Precision)> {
    let entries = read_archive_file(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::data(path, format!("checkpoint lacks entry {name:?}")))
    };
    let cfg_text = String::from_utf8(find("config")?.as_bytes()?.to_vec())
        .map_err(|_| Error::data(path, "config entry is not UTF-8".to_string()))?;
    let cfg = RunConfig::from_toml(&cfg_text)?;
    let precision = match find("train/precision")?.as_bytes()? {
        b"f32" => Precision::F32,
        b"f64" => Precision::F64,
        other => {
            return Err(Error::data(
                path,
                format!("unknown precision {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    Ok((cfg, precision))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let (cfg, precision) = checkpoint_config(path)?;
    let want = precision_of::<T>();
    if precision != want {
        return Err(Error::data(
            path,
            format!("checkpoint precision {precision:?} does not match requested {want:?}"),
        ));
    }
    let entries = read_archive_file(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::data(path, format!("checkpoint lacks entry {name:?}")))
    };

    let mut state = init_state::<T>(&cfg)?;
    let names: Vec<(usize, String)> =
        state.store.iter().map(|(id, n, _)| (id.index(), n.to_string())).collect();
    for (slot, name) in names {
        let t = find(&format!("param/{name}"))?.to_tensor::<T>()?;
        let m = find(&format!("adam/m/{name}"))?.to_tensor::<T>()?;
        let v = find(&format!("adam/v/{name}"))?.to_tensor::<T>()?;
        state.opt.m[slot] = m;
        state.opt.v[slot] = v;
        state.store.load_value(&name, t)?;
    }
    state.opt.step = find("opt/step")?.as_i64s()?[0] as u64;
    state.lr = find("train/lr")?.as_f64()?;
    let progress = find("train/progress")?.as_i64s()?.to_vec();
    if progress.len() != 3 {
        return Err(Error::data(path, "train/progress must hold 3 values".to_string()));
    }
    state.epoch = progress[0] as usize;
    state.step = progress[1] as u64;
    state.stall = progress[2] as usize;
    state.best_val = find("train/best_val")?.as_f64()?;
    let sig = find("train/sigma2")?.to_tensor::<f64>()?;
    if sig.data().len() != state.sigma2.len() {
        return Err(Error::data(path, "sigma2 length mismatch".to_string()));
    }
    state.sigma2 = sig.data().to_vec();
    let wp = find("rng/word_pos")?.as_bytes()?;
    if wp.len() != 16 {
        return Err(Error::data(path, "rng/word_pos must hold 16 bytes".to_string()));
    }
    state.rng.set_word_pos(u128::from_le_bytes(wp.try_into().expect("length checked")));
    if let Some(ema) = state.ema.as_mut() {
        for (name, counts, sums) in ema.books.iter_mut() {
            let c = find(&format!("ema/{name}/counts"))?.to_tensor::<f64>()?;
            let s = find(&format!("ema/{name}/sums"))?.to_tensor::<f64>()?;
            if c.data().len() != counts.len() || s.data().len() != sums.len() {
                return Err(Error::data(path, format!("EMA shape mismatch for {name:?}")));
            }
            counts.copy_from_slice(c.data());
            sums.copy_from_slice(s.data());
        }
    }
    Ok(state)
}
