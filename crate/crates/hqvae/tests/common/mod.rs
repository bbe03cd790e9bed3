//! Shared harness for the loss and acceptance tests: a tiny two-layer model
//! (4x4x3 input, 2x2 latents, four codes of dimension four) plus
//! finite-difference drivers for the stochastic and straight-through paths.

#![allow(dead_code)]

use hqvae::config::RunConfig;
use hqvae::loss::{build_loss, sigma2_slots};
use hqvae::nn::{capture_pinned, forward, init_params, SampleMode};
use hqvae_oracles::{check_grads_against, FdReport};
use hqvae_tensor::{Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-layer toy: 48-dimensional input, both layers at 2x2 sites with K=4
/// codes of dimension 4. `second` is the lower layer's kind; None gives the
/// single-layer model.
pub fn toy_cfg(variant: &str, second: Option<&str>, extra_model: &str) -> RunConfig {
    let mut text = format!(
        r#"
        seed = 3
        [data]
        image_size = 4
        [model]
        variant = "{variant}"
        d_b = 4
        resblocks = 1
        {extra_model}
        [[model.layer]]
        kind = "first"
        size = 2
        k = 4
    "#
    );
    if let Some(kind) = second {
        text.push_str(&format!(
            r#"
        [[model.layer]]
        kind = "{kind}"
        size = 2
        k = 4
    "#
        ));
    }
    RunConfig::from_toml(&text).expect("toy config parses")
}

pub fn toy_x(batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..batch * 48).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(&[batch, 3, 4, 4], data).unwrap()
}

pub fn all_ids<T: hqvae_tensor::Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.iter().map(|(id, _, _)| id).collect()
}

/// Finite differences for a stochastic objective: the forward is replayed
/// with fixed Gumbel noise and fixed observation variance, so the loss is a
/// smooth deterministic function of the parameters.
pub fn fd_stochastic(cfg: &RunConfig, tau: f64, h: f64) -> FdReport {
    let shape = cfg.validate().unwrap();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_params::<f64>(cfg, &shape, &mut init_rng).unwrap();
    let x = toy_x(2, 99);
    let slots = sigma2_slots(cfg, &shape);

    let value = |st: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let trace = forward(
            &mut g,
            st,
            cfg,
            &shape,
            x.clone(),
            &SampleMode::Relaxed { tau },
            &mut rng,
            cfg.model.progressive,
        )
        .unwrap();
        let mut s = vec![cfg.model.sigma2_init; slots];
        build_loss(&mut g, cfg, &shape, &trace, &mut s, false).unwrap().value
    };

    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let trace = forward(
        &mut g,
        &store,
        cfg,
        &shape,
        x.clone(),
        &SampleMode::Relaxed { tau },
        &mut rng,
        cfg.model.progressive,
    )
    .unwrap();
    let mut s = vec![cfg.model.sigma2_init; slots];
    let parts = build_loss(&mut g, cfg, &shape, &trace, &mut s, false).unwrap();
    let grads = g.backward(parts.total, &store).unwrap();

    let ids = all_ids(&store);
    check_grads_against(&mut store, &ids, &grads, h, value)
}

/// Finite differences for a straight-through objective. The check runs on
/// the pinned surrogate (assignments and jump constants frozen at the
/// reference point), whose exact gradient is the straight-through one; the
/// returned pair also reports how far the surrogate's analytic gradients sit
/// from the production graph's (rounding-level if the wiring is right).
pub fn fd_baseline(cfg: &RunConfig, h: f64) -> (FdReport, f64) {
    let shape = cfg.validate().unwrap();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_params::<f64>(cfg, &shape, &mut init_rng).unwrap();
    let x = toy_x(2, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // reference pass: real straight-through graph and its gradients
    let mut g = Graph::new();
    let trace =
        forward(&mut g, &store, cfg, &shape, x.clone(), &SampleMode::Eval, &mut rng, false)
            .unwrap();
    let mut s = vec![];
    let parts = build_loss(&mut g, cfg, &shape, &trace, &mut s, false).unwrap();
    let grads_real = g.backward(parts.total, &store).unwrap();
    let pin = capture_pinned(&g, &store, cfg, &shape, &trace).unwrap();

    // surrogate pass: same loss with the straight-through constants pinned
    let mut g2 = Graph::new();
    let trace2 = forward(
        &mut g2,
        &store,
        cfg,
        &shape,
        x.clone(),
        &SampleMode::Pinned(&pin),
        &mut rng,
        false,
    )
    .unwrap();
    let parts2 = build_loss(&mut g2, cfg, &shape, &trace2, &mut s, false).unwrap();
    let grads_pin = g2.backward(parts2.total, &store).unwrap();

    let ids = all_ids(&store);
    let mut wiring_gap = 0.0f64;
    for &id in &ids {
        let (a, b) = (grads_real.get(id), grads_pin.get(id));
        let n = store.get(id).elems();
        for i in 0..n {
            let av = a.map_or(0.0, |t| t.data()[i]);
            let bv = b.map_or(0.0, |t| t.data()[i]);
            let rel = (av - bv).abs() / av.abs().max(bv.abs()).max(1.0);
            wiring_gap = wiring_gap.max(rel);
        }
    }

    let value = |st: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(
            &mut g,
            st,
            cfg,
            &shape,
            x.clone(),
            &SampleMode::Pinned(&pin),
            &mut rng,
            false,
        )
        .unwrap();
        let mut s = vec![];
        build_loss(&mut g, cfg, &shape, &trace, &mut s, false).unwrap().value
    };
    let report = check_grads_against(&mut store, &ids, &grads_real, h, value);
    (report, wiring_gap)
}
