//! One-seed pilot of the stochastic-vs-deterministic trend at the full
//! protocol scale, with metrics logged for schedule inspection.

use hqvae::config::RunConfig;
use hqvae::data::load_splits;
use hqvae::eval::evaluate;
use hqvae::train::{init_state, train};
use std::path::PathBuf;

fn run(variant: &str, tau_decay: f64, batch: usize, residual_size: usize, tag: &str) {
    let layers = if residual_size > 0 {
        format!(
            r#"
        shared_codebook = true
        [[model.layer]]
        kind = "first"
        size = {residual_size}
        k = 32
        [[model.layer]]
        kind = "residual"
        size = {residual_size}
        k = 32
        [[model.layer]]
        kind = "residual"
        size = {residual_size}
        k = 32
        [[model.layer]]
        kind = "residual"
        size = {residual_size}
        k = 32
    "#
        )
    } else {
        r#"
        [[model.layer]]
        kind = "first"
        size = 8
        k = 32
        [[model.layer]]
        kind = "injected"
        size = 16
        k = 32
    "#
        .to_string()
    };
    let reset = if variant == "rqvae" { "codebook_reset = true" } else { "" };
    let text = format!(
        r#"
        seed = 1
        [data]
        train_images = 5000
        val_images = 500
        test_images = 500
        image_size = 32
        [model]
        variant = "{variant}"
        d_b = 8
        resblocks = 1
        {reset}
        {layers}
        [train]
        batch = {batch}
        epochs = 20
        tau_decay = {tau_decay}
    "#
    );
    let cfg = RunConfig::from_toml(&text).unwrap();
    let splits = load_splits(&cfg.data, None, cfg.seed).unwrap();
    let mut state = init_state::<f32>(&cfg).unwrap();
    let dir = PathBuf::from(format!("/tmp/pilot_{tag}"));
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = std::time::Instant::now();
    train(&mut state, &splits, Some(&dir)).unwrap();
    let report = evaluate(&mut state, &splits.test).unwrap();
    println!(
        "{tag}: rmse_x100={:.3} ssim={:.4} perp={:?} s2_ratio={:?} ({:.0}s)",
        report.rmse_x100,
        report.ssim,
        report.perplexity,
        report.s2_ratio,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let which: Vec<String> = std::env::args().skip(1).collect();
    for w in &which {
        match w.as_str() {
            "sq" => run("sqvae2", 1e-5, 8, 0, "sq"),
            "vq" => run("vqvae2", 1e-5, 8, 0, "vq"),
            "sq_fast" => run("sqvae2", 3e-4, 8, 0, "sq_fast"),
            "sq4" => run("sqvae2", 1e-5, 4, 0, "sq4"),
            "vq4" => run("vqvae2", 1e-5, 4, 0, "vq4"),
            "sq4_fast" => run("sqvae2", 3e-4, 4, 0, "sq4_fast"),
            "sq4_r5" => run("sqvae2", 5e-5, 4, 0, "sq4_r5"),
            "sq4_r10" => run("sqvae2", 1e-4, 4, 0, "sq4_r10"),
            "rsq4" => run("rsqvae", 1e-5, 4, 8, "rsq4"),
            "rq4" => run("rqvae", 1e-5, 4, 8, "rq4"),
            "rsq16" => run("rsqvae", 1e-5, 4, 16, "rsq16"),
            "rq16" => run("rqvae", 1e-5, 4, 16, "rq16"),
            other => eprintln!("unknown pilot {other}"),
        }
    }
}
