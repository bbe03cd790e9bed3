//! Rough per-step timing at a few candidate training scales.

use hqvae::config::RunConfig;
use hqvae::data::synth_blobs;
use hqvae::train::{init_state, train_step};
use std::time::Instant;

fn bench(label: &str, toml: &str, steps: usize) {
    let cfg = RunConfig::from_toml(toml).unwrap();
    let mut state = init_state::<f32>(&cfg).unwrap();
    let data = synth_blobs(cfg.train.batch, cfg.data.image_size, 1);
    let idx: Vec<usize> = (0..cfg.train.batch).collect();
    let x = data.batch_tensor::<f32>(&idx).unwrap();
    // warm-up
    train_step(&mut state, x.clone()).unwrap();
    let t0 = Instant::now();
    for _ in 0..steps {
        train_step(&mut state, x.clone()).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("{label:24} {:8.1} ms/step", dt * 1e3);
}

fn main() {
    bench(
        "sqvae2 d16 b32 8/16",
        r#"
        [data]
        image_size = 32
        [model]
        variant = "sqvae2"
        d_b = 16
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 8
        k = 32
        [[model.layer]]
        kind = "injected"
        size = 16
        k = 32
        [train]
        batch = 32
        "#,
        10,
    );
    bench(
        "sqvae2 d12 b32 8/16",
        r#"
        [data]
        image_size = 32
        [model]
        variant = "sqvae2"
        d_b = 12
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 8
        k = 32
        [[model.layer]]
        kind = "injected"
        size = 16
        k = 32
        [train]
        batch = 32
        "#,
        10,
    );
    bench(
        "sqvae2 d8 b32 8/16",
        r#"
        [data]
        image_size = 32
        [model]
        variant = "sqvae2"
        d_b = 8
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 8
        k = 32
        [[model.layer]]
        kind = "injected"
        size = 16
        k = 32
        [train]
        batch = 32
        "#,
        10,
    );
    bench(
        "rsqvae d16 b32 L4 8^2",
        r#"
        [data]
        image_size = 32
        [model]
        variant = "rsqvae"
        d_b = 16
        resblocks = 1
        shared_codebook = true
        [[model.layer]]
        kind = "first"
        size = 8
        k = 32
        [[model.layer]]
        kind = "residual"
        size = 8
        k = 32
        [[model.layer]]
        kind = "residual"
        size = 8
        k = 32
        [[model.layer]]
        kind = "residual"
        size = 8
        k = 32
        [train]
        batch = 32
        "#,
        10,
    );
    bench(
        "sqvae2 d16 b32 16px 4/8",
        r#"
        [data]
        image_size = 16
        [model]
        variant = "sqvae2"
        d_b = 16
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 4
        k = 32
        [[model.layer]]
        kind = "injected"
        size = 8
        k = 32
        [train]
        batch = 32
        "#,
        10,
    );
}
