//! Rate-distortion sweeps: train a grid of configurations (optionally in
//! parallel single-threaded jobs), evaluate each on its test split, and
//! tabulate per-run rows plus per-configuration aggregates.

use std::path::Path;
use std::sync::Mutex;

use crate::config::{Precision, RunConfig};
use crate::data::load_splits;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::train::{init_state, train};

#[derive(Clone, Debug)]
pub struct SweepRow {
    /// Configuration identity with the seed masked out, so repeats of the
    /// same setting group together.
    pub family: String,
    pub variant: String,
    pub bits: f64,
    pub seed: u64,
    pub rmse_x100: f64,
    pub ssim: f64,
    pub perplexity: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub family: String,
    pub variant: String,
    pub bits: f64,
    pub runs: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

pub fn family_hash(cfg: &RunConfig) -> String {
    let mut masked = cfg.clone();
    masked.seed = 0;
    masked.hash12()
}

fn run_one_typed<T: hqvae_tensor::Scalar>(
    cfg: &RunConfig,
    root: Option<&Path>,
) -> Result<SweepRow> {
    let shape = cfg.validate()?;
    let splits = load_splits(&cfg.data, root, cfg.seed)?;
    let mut state = init_state::<T>(cfg)?;
    train(&mut state, &splits, None)?;
    let report = evaluate(&mut state, &splits.test)?;
    Ok(SweepRow {
        family: family_hash(cfg),
        variant: cfg.model.variant.name().to_string(),
        bits: cfg.bits(&shape),
        seed: cfg.seed,
        rmse_x100: report.rmse_x100,
        ssim: report.ssim,
        perplexity: report.perplexity,
    })
}

pub fn run_one(cfg: &RunConfig, root: Option<&Path>) -> Result<SweepRow> {
    match cfg.train.precision {
        Precision::F32 => run_one_typed::<f32>(cfg, root),
        Precision::F64 => run_one_typed::<f64>(cfg, root),
    }
}

/// Sample standard deviation (n-1 denominator); zero for a single run.
fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut families: Vec<String> = Vec::new();
    for r in rows {
        if !families.contains(&r.family) {
            families.push(r.family.clone());
        }
    }
    families.sort();
    families
        .iter()
        .map(|f| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| &r.family == f).collect();
            let rmse: Vec<f64> = group.iter().map(|r| r.rmse_x100).collect();
            let ssim: Vec<f64> = group.iter().map(|r| r.ssim).collect();
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            let (ssim_mean, ssim_std) = mean_std(&ssim);
            SweepSummary {
                family: f.clone(),
                variant: group[0].variant.clone(),
                bits: group[0].bits,
                runs: group.len(),
                rmse_mean,
                rmse_std,
                ssim_mean,
                ssim_std,
            }
        })
        .collect()
}

/// Trains every configuration and collects rows in a deterministic order
/// regardless of scheduling. `jobs` bounds the number of parallel runs.
pub fn rd_sweep(
    configs: &[RunConfig],
    root: Option<&Path>,
    jobs: usize,
) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    if configs.is_empty() {
        return Err(Error::config("rd-sweep needs at least one configuration".to_string()));
    }
    let jobs = jobs.max(1).min(configs.len());
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep counter");
                    if *n >= configs.len() {
                        break;
                    }
                    let i = *n;
                    *n += 1;
                    i
                };
                let row = run_one(&configs[i], root);
                results.lock().expect("sweep results")[i] = Some(row);
            });
        }
    });

    let collected = results.into_inner().expect("sweep results");
    let mut rows = Vec::with_capacity(configs.len());
    for slot in collected {
        rows.push(slot.expect("every slot filled")?);
    }
    rows.sort_by(|a, b| (&a.family, a.seed).cmp(&(&b.family, b.seed)));
    let summaries = summarize(&rows);
    Ok((rows, summaries))
}

pub fn write_csvs(
    rows: &[SweepRow],
    summaries: &[SweepSummary],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows_path = dir.join("rd.csv");
    let mut out = String::from("# schema=hqvae.rd.v1\nfamily,variant,bits,seed,rmse_x100,ssim,perplexities\n");
    for r in rows {
        let perps =
            r.perplexity.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.family, r.variant, r.bits, r.seed, r.rmse_x100, r.ssim, perps
        ));
    }
    std::fs::write(&rows_path, out).map_err(|e| Error::io(&rows_path, e))?;

    let sum_path = dir.join("rd_summary.csv");
    let mut out = String::from(
        "# schema=hqvae.rd_summary.v1\nfamily,variant,bits,runs,rmse_mean,rmse_std,ssim_mean,ssim_std\n",
    );
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.family, s.variant, s.bits, s.runs, s.rmse_mean, s.rmse_std, s.ssim_mean, s.ssim_std
        ));
    }
    std::fs::write(&sum_path, out).map_err(|e| Error::io(&sum_path, e))?;
    Ok(())
}
