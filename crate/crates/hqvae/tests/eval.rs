//! Evaluation checks: SSIM against closed forms, PNG round trips,
//! deterministic reports, prefix dumps, and prior sampling.

use hqvae::config::RunConfig;
use hqvae::data::load_splits;
use hqvae::eval::{
    evaluate, prefix_reconstructions, progressive_dump, sample_to_dir, ssim,
    supports_prefix_decode, write_png,
};
use hqvae::train::{init_state, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::PathBuf;

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hqvae-eval-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn err_of<T>(r: Result<T, hqvae::Error>) -> String {
    match r {
        Err(e) => e.to_string(),
        Ok(_) => panic!("expected an error"),
    }
}

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// 16x16 model small enough to evaluate in milliseconds but big enough for
/// the 11x11 SSIM window.
fn eval_cfg(variant: &str, second: &str) -> RunConfig {
    let second_size = if second == "residual" { 4 } else { 8 };
    let text = format!(
        r#"
        seed = 21
        [data]
        train_images = 8
        val_images = 4
        test_images = 4
        image_size = 16
        [model]
        variant = "{variant}"
        d_b = 4
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 4
        k = 4
        [[model.layer]]
        kind = "{second}"
        size = {second_size}
        k = 4
        [train]
        batch = 8
    "#
    );
    RunConfig::from_toml(&text).unwrap()
}

fn fresh_state(cfg: &RunConfig) -> TrainState<f64> {
    init_state::<f64>(cfg).unwrap()
}

// --- SSIM ---

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let x = random_image(3, 16, 16, 1);
    let s = ssim(&x, &x, 3, 16, 16).unwrap();
    assert!((s - 1.0).abs() < 1e-12, "got {s}");
}

#[test]
fn ssim_is_symmetric() {
    let x = random_image(3, 16, 16, 2);
    let y = random_image(3, 16, 16, 3);
    let a = ssim(&x, &y, 3, 16, 16).unwrap();
    let b = ssim(&y, &x, 3, 16, 16).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    assert!(a < 1.0, "unrelated images should not look identical");
}

#[test]
fn ssim_of_a_constant_shift_matches_the_closed_form() {
    // flat images: variances and covariance vanish in every window, leaving
    // only the luminance ratio
    let x = vec![0.4; 3 * 12 * 12];
    let y = vec![0.5; 3 * 12 * 12];
    let want = (2.0 * 0.4 * 0.5 + 1e-4) / (0.4 * 0.4 + 0.5 * 0.5 + 1e-4);
    let got = ssim(&x, &y, 3, 12, 12).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn ssim_degrades_with_noise_amplitude() {
    let x = random_image(1, 16, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perturb = |amp: f64| {
        let y: Vec<f64> =
            x.iter().zip(&noise).map(|(v, n)| (v + amp * n).clamp(0.0, 1.0)).collect();
        ssim(&x, &y, 1, 16, 16).unwrap()
    };
    let (small, large) = (perturb(0.02), perturb(0.2));
    assert!(small < 1.0 && small > large, "small {small}, large {large}");
}

#[test]
fn ssim_rejects_bad_shapes() {
    let x = vec![0.1; 10];
    let err = err_of(ssim(&x, &x, 3, 16, 16));
    assert!(err.contains("ssim"), "unexpected message: {err}");
    let y = vec![0.1; 3 * 8 * 8];
    let err = err_of(ssim(&y, &y, 3, 8, 8));
    assert!(err.contains("smaller than"), "unexpected message: {err}");
}

// --- PNG output ---

#[test]
fn png_files_round_trip_the_quantized_pixels() {
    let dir = tmp_dir("png");
    let path = dir.join("img.png");
    let mut img = vec![0.0f64; 3 * 8 * 8];
    for (j, v) in img.iter_mut().enumerate() {
        *v = (j % 256) as f64 / 255.0;
    }
    img[0] = 1.7; // clamps to white
    img[1] = -0.3; // clamps to black
    write_png(&path, &img, 3, 8, 8).unwrap();

    let decoder = png::Decoder::new(fs::File::open(&path).unwrap());
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (8, 8));
    assert_eq!(info.color_type, png::ColorType::Rgb);
    let plane = 64;
    for px in 0..plane {
        for ch in 0..3 {
            let want = (img[ch * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(buf[px * 3 + ch], want, "pixel {px} channel {ch}");
        }
    }
    let err = err_of(write_png(&dir.join("bad.png"), &img[..10], 3, 8, 8));
    assert!(err.contains("write_png"), "unexpected message: {err}");
    let _ = fs::remove_dir_all(dir);
}

// --- evaluation reports ---

#[test]
fn evaluation_is_deterministic_and_well_formed() {
    let cfg = eval_cfg("sqvae2", "injected");
    let splits = load_splits(&cfg.data, None, cfg.seed).unwrap();
    let mut state = fresh_state(&cfg);
    let a = evaluate(&mut state, &splits.test).unwrap();
    let b = evaluate(&mut state, &splits.test).unwrap();
    assert_eq!(a.rmse_x100, b.rmse_x100, "evaluation must not consume randomness");
    assert_eq!(a.ssim, b.ssim);
    assert_eq!(a.perplexity, b.perplexity);

    assert_eq!(a.images, 4);
    assert!(a.dataset.contains("synth"));
    assert!(a.rmse_x100 >= 0.0 && a.ssim <= 1.0);
    for (l, p) in a.perplexity.iter().enumerate() {
        assert!(*p >= 1.0 && *p <= 4.0, "layer {l} perplexity {p} out of [1, K]");
    }
    // 4x4 and 8x8 sites at 2 bits per code
    assert_eq!(a.bits, ((16 + 64) * 2) as f64);
    assert_eq!(a.s2_ratio.len(), 2);
    assert_eq!(a.mean_entropy.len(), 2);
    assert!(a.mean_entropy.iter().all(|e| *e >= 0.0));

    let header_fields = a.csv_header().split(',').count();
    assert_eq!(header_fields, a.csv_row().split(',').count());

    let baseline = evaluate(&mut fresh_state(&eval_cfg("vqvae2", "injected")), &splits.test)
        .unwrap();
    assert!(baseline.s2_ratio.is_empty() && baseline.mean_entropy.is_empty());
}

// --- prefix decoding and dumps ---

#[test]
fn prefix_decode_support_follows_the_variant() {
    assert!(supports_prefix_decode(&eval_cfg("rsqvae", "residual")));
    assert!(supports_prefix_decode(&eval_cfg("rqvae", "residual")));
    assert!(!supports_prefix_decode(&eval_cfg("sqvae2", "injected")));
    assert!(!supports_prefix_decode(&eval_cfg("vqvae2", "injected")));
    let mut prog = eval_cfg("sqvae2", "injected");
    prog.model.progressive = true;
    assert!(supports_prefix_decode(&prog));
}

#[test]
fn progressive_dumps_write_images_and_the_mse_table() {
    let cfg = eval_cfg("rsqvae", "residual");
    let splits = load_splits(&cfg.data, None, cfg.seed).unwrap();
    let mut state = fresh_state(&cfg);
    let dir = tmp_dir("dump");
    progressive_dump(&mut state, &splits.test, 2, &dir).unwrap();

    for i in 0..2 {
        assert!(dir.join(format!("img{i:03}_input.png")).exists());
        for l in 1..=2 {
            assert!(dir.join(format!("img{i:03}_prefix{l}.png")).exists());
            assert!(dir.join(format!("img{i:03}_delta{l}.png")).exists());
        }
    }
    let table = fs::read_to_string(dir.join("prefix_mse.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "layer,mean_mse");
    assert_eq!(lines.len(), 3, "one row per layer");
    for (l, line) in lines[1..].iter().enumerate() {
        let mse: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(mse.is_finite() && mse >= 0.0, "layer {} mse {mse}", l + 1);
    }

    // deepest prefix is the full reconstruction
    let x = splits.test.batch_tensor::<f64>(&[0, 1]).unwrap();
    let prefixes = prefix_reconstructions(&mut state, x).unwrap();
    assert_eq!(prefixes.len(), 2);
    let _ = fs::remove_dir_all(dir);
}

#[test]
fn dumps_refuse_unsupported_models_and_empty_requests() {
    let cfg = eval_cfg("vqvae2", "injected");
    let splits = load_splits(&cfg.data, None, cfg.seed).unwrap();
    let mut state = fresh_state(&cfg);
    let dir = tmp_dir("dump-bad");
    let err = err_of(progressive_dump(&mut state, &splits.test, 2, &dir));
    assert!(err.contains("prefix decoding"), "unexpected message: {err}");

    let cfg = eval_cfg("rsqvae", "residual");
    let mut state = fresh_state(&cfg);
    let err = err_of(progressive_dump(&mut state, &splits.test, 0, &dir));
    assert!(err.contains("zero images"), "unexpected message: {err}");
    let _ = fs::remove_dir_all(dir);
}

// --- prior sampling ---

#[test]
fn prior_samples_decode_deterministically() {
    let cfg = eval_cfg("sqvae2", "injected");
    let mut state = fresh_state(&cfg);
    let (da, db, dc) = (tmp_dir("samp-a"), tmp_dir("samp-b"), tmp_dir("samp-c"));
    sample_to_dir(&mut state, 3, 12, &da).unwrap();
    sample_to_dir(&mut state, 3, 12, &db).unwrap();
    sample_to_dir(&mut state, 3, 99, &dc).unwrap();
    for i in 0..3 {
        let name = format!("sample{i:03}.png");
        let a = fs::read(da.join(&name)).unwrap();
        assert_eq!(a, fs::read(db.join(&name)).unwrap(), "same seed, same bytes");
    }
    let a = fs::read(da.join("sample000.png")).unwrap();
    let c = fs::read(dc.join("sample000.png")).unwrap();
    assert_ne!(a, c, "different seeds should draw different codes");
    let err = err_of(sample_to_dir(&mut state, 0, 1, &da));
    assert!(err.contains("zero"), "unexpected message: {err}");
    for d in [da, db, dc] {
        let _ = fs::remove_dir_all(d);
    }
}
