//! Objective-level checks: analytic gradients against central differences
//! for every variant, reduction identities between the family members,
//! telescoping structure of the residual gaps, reassembly of the reported
//! loss parts, variance refitting, and the EMA codebook statistics.

mod common;

use common::{all_ids, fd_baseline, fd_stochastic, toy_cfg, toy_x};
use hqvae::config::RunConfig;
use hqvae::loss::{build_loss, check_finite, sigma2_slots, EmaState, LossParts};
use hqvae::nn::{codebook_name, forward, init_params, ForwardTrace, SampleMode};
use hqvae_tensor::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_TOL: f64 = 1e-4;
const WIRING_TOL: f64 = 1e-9;
const H: f64 = 1e-5;

fn values(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Run {
    g: Graph<f64>,
    store: ParamStore<f64>,
    trace: ForwardTrace,
    parts: LossParts,
    sigma2: Vec<f64>,
}

fn run_eval(cfg: &RunConfig, refit: bool) -> Run {
    let shape = cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let store = init_params::<f64>(cfg, &shape, &mut rng).unwrap();
    let x = toy_x(2, 99);
    let mut g = Graph::new();
    let trace = forward(
        &mut g,
        &store,
        cfg,
        &shape,
        x,
        &SampleMode::Eval,
        &mut rng,
        cfg.model.progressive,
    )
    .unwrap();
    let mut sigma2 = vec![cfg.model.sigma2_init; sigma2_slots(cfg, &shape)];
    let parts = build_loss(&mut g, cfg, &shape, &trace, &mut sigma2, refit).unwrap();
    Run { g, store, trace, parts, sigma2 }
}

// --- gradients against central differences, one test per objective ---

#[test]
fn finite_differences_vqvae() {
    let (report, wiring) = fd_baseline(&toy_cfg("vqvae", None, ""), H);
    assert!(wiring < WIRING_TOL, "surrogate gradients drift: {wiring:.3e}");
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_vqvae2() {
    let (report, wiring) = fd_baseline(&toy_cfg("vqvae2", Some("injected"), ""), H);
    assert!(wiring < WIRING_TOL, "surrogate gradients drift: {wiring:.3e}");
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_rqvae() {
    let (report, wiring) = fd_baseline(&toy_cfg("rqvae", Some("residual"), ""), H);
    assert!(wiring < WIRING_TOL, "surrogate gradients drift: {wiring:.3e}");
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_sqvae2() {
    let report = fd_stochastic(&toy_cfg("sqvae2", Some("injected"), ""), 0.7, H);
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_rsqvae() {
    let report = fd_stochastic(&toy_cfg("rsqvae", Some("residual"), ""), 0.7, H);
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_rsqvae_naive() {
    let cfg = toy_cfg("rsqvae", Some("residual"), "naive_objective = true");
    let report = fd_stochastic(&cfg, 0.7, H);
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_progressive() {
    let cfg = toy_cfg("sqvae2", Some("injected"), "progressive = true");
    let report = fd_stochastic(&cfg, 0.7, H);
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

#[test]
fn finite_differences_hybrid() {
    let cfg = RunConfig::from_toml(
        r#"
        seed = 3
        [data]
        image_size = 4
        [model]
        variant = "hybrid"
        d_b = 4
        resblocks = 1
        [[model.layer]]
        kind = "first"
        size = 2
        k = 4
        [[model.layer]]
        kind = "injected"
        size = 2
        k = 4
        [[model.layer]]
        kind = "residual"
        size = 2
        k = 4
    "#,
    )
    .unwrap();
    let report = fd_stochastic(&cfg, 0.7, H);
    assert!(report.max_rel() < FD_TOL, "worst {:?}", report.worst_param);
}

// --- reduction identities between family members ---

#[test]
fn single_layer_stochastic_variants_coincide() {
    let v1 = run_eval(&toy_cfg("sqvae2", None, ""), false).parts.value;
    let v2 = run_eval(&toy_cfg("rsqvae", None, ""), false).parts.value;
    let v3 = run_eval(&toy_cfg("hybrid", None, ""), false).parts.value;
    assert!((v1 - v2).abs() < 1e-12, "sqvae2 {v1} vs rsqvae {v2}");
    assert!((v1 - v3).abs() < 1e-12, "sqvae2 {v1} vs hybrid {v3}");
}

#[test]
fn hybrid_with_singleton_groups_matches_the_injected_model() {
    let a = run_eval(&toy_cfg("hybrid", Some("injected"), ""), false).parts.value;
    let b = run_eval(&toy_cfg("sqvae2", Some("injected"), ""), false).parts.value;
    assert!((a - b).abs() < 1e-12, "hybrid {a} vs sqvae2 {b}");
}

#[test]
fn hybrid_with_one_group_matches_the_residual_model() {
    let a = run_eval(&toy_cfg("hybrid", Some("residual"), ""), false).parts.value;
    let b = run_eval(&toy_cfg("rsqvae", Some("residual"), ""), false).parts.value;
    assert!((a - b).abs() < 1e-12, "hybrid {a} vs rsqvae {b}");
}

#[test]
fn progressive_with_one_group_matches_the_plain_objective() {
    let plain = run_eval(&toy_cfg("sqvae2", None, ""), true).parts.value;
    let prog = run_eval(&toy_cfg("sqvae2", None, "progressive = true"), true).parts.value;
    assert!((plain - prog).abs() < 1e-12, "plain {plain} vs progressive {prog}");
}

#[test]
fn naive_and_grouped_objectives_differ_in_depth() {
    let corrected = run_eval(&toy_cfg("rsqvae", Some("residual"), ""), false);
    let naive =
        run_eval(&toy_cfg("rsqvae", Some("residual"), "naive_objective = true"), false);
    // same parameters, same forward pass; only the gap terms change
    assert!((corrected.parts.recon_sq[0] - naive.parts.recon_sq[0]).abs() < 1e-9);
    assert_eq!(corrected.parts.gap.len(), 1);
    assert_eq!(naive.parts.gap.len(), 2);
    assert!(
        (corrected.parts.value - naive.parts.value).abs() > 1e-6,
        "objectives should disagree once a residual chain is deeper than one layer"
    );
}

// --- telescoping structure of the residual gaps ---

#[test]
fn naive_gaps_telescope_over_code_prefix_sums() {
    let cfg = toy_cfg("rsqvae", Some("residual"), "naive_objective = true");
    let run = run_eval(&cfg, false);
    let target = values(&run.g, run.trace.groups[0].target);
    let mut cum = vec![0.0; target.len()];
    for (l, lt) in run.trace.layers.iter().enumerate() {
        for (c, z) in cum.iter_mut().zip(values(&run.g, lt.z)) {
            *c += z;
        }
        let expect = sq_diff(&target, &cum);
        let got = run.parts.gap[l];
        assert!((expect - got).abs() < 1e-9, "layer {l}: {expect} vs {got}");
    }
}

#[test]
fn grouped_gap_keeps_only_the_final_telescope_term() {
    let corrected = run_eval(&toy_cfg("rsqvae", Some("residual"), ""), false);
    let naive =
        run_eval(&toy_cfg("rsqvae", Some("residual"), "naive_objective = true"), false);
    let target = values(&corrected.g, corrected.trace.groups[0].target);
    let y = values(&corrected.g, corrected.trace.groups[0].y_sites);
    assert!((corrected.parts.gap[0] - sq_diff(&target, &y)).abs() < 1e-9);
    assert!(
        (corrected.parts.gap[0] - naive.parts.gap.last().unwrap()).abs() < 1e-9,
        "grouped gap should equal the deepest naive term"
    );
}

// --- reported parts reassemble the scalar total ---

fn reassemble(cfg: &RunConfig, run: &Run) -> f64 {
    let shape = cfg.validate().unwrap();
    let n = run.trace.batch as f64;
    let d = shape.input_dim() as f64;
    let mut total = 0.0;
    if cfg.model.variant.is_stochastic() {
        for (sq, s2) in run.parts.recon_sq.iter().zip(&run.parts.sigma2) {
            total += sq / (2.0 * s2 * n) + 0.5 * d * s2.ln();
        }
        if cfg.model.naive_objective {
            for (sq, s2) in run.parts.gap.iter().zip(&run.parts.s2) {
                total += sq / (2.0 * s2 * n);
            }
        } else {
            for (gi, gr) in shape.groups.iter().enumerate() {
                let s2_sum: f64 = gr.layers.clone().map(|l| run.parts.s2[l]).sum();
                total += run.parts.gap[gi] / (2.0 * s2_sum * n);
            }
        }
        for h in &run.parts.entropy {
            total -= h / n;
        }
    } else {
        total += run.parts.recon_sq[0] / n;
        for c in &run.parts.commit {
            total += cfg.model.beta * c / n;
        }
    }
    total
}

#[test]
fn totals_reassemble_from_the_reported_parts() {
    let cases = [
        toy_cfg("sqvae2", Some("injected"), ""),
        toy_cfg("sqvae2", Some("injected"), "sigma2_init = 4.0"),
        toy_cfg("rsqvae", Some("residual"), "naive_objective = true"),
        toy_cfg("sqvae2", Some("injected"), "progressive = true"),
        toy_cfg("vqvae2", Some("injected"), ""),
        toy_cfg("rqvae", Some("residual"), ""),
    ];
    for cfg in cases {
        let run = run_eval(&cfg, false);
        let expect = reassemble(&cfg, &run);
        assert!(
            (run.parts.value - expect).abs() < 1e-9,
            "{}: total {} vs parts {}",
            cfg.model.variant.name(),
            run.parts.value,
            expect
        );
    }
}

#[test]
fn progressive_prefixes_carry_their_own_reconstruction_terms() {
    let cfg = toy_cfg("sqvae2", Some("injected"), "progressive = true");
    let run = run_eval(&cfg, true);
    assert_eq!(run.parts.recon_sq.len(), 2);
    assert_eq!(run.parts.sigma2.len(), 2);
    // the deepest prefix is the full reconstruction
    let x = values(&run.g, run.trace.x);
    let recon = values(&run.g, run.trace.recon);
    assert!((run.parts.recon_sq[1] - sq_diff(&x, &recon)).abs() < 1e-9);
    // refitting may not assign a deeper prefix more noise than a coarser one
    assert!(run.parts.sigma2[1] <= run.parts.sigma2[0]);
    assert!((run.parts.value - reassemble(&cfg, &run)).abs() < 1e-9);
}

#[test]
fn refitting_picks_the_variance_minimizer() {
    let cfg = toy_cfg("sqvae2", Some("injected"), "");
    let run = run_eval(&cfg, true);
    let n = run.trace.batch as f64;
    let d = 48.0;
    let star = run.parts.sigma2[0];
    assert!((star - run.parts.recon_sq[0] / (n * d)).abs() < 1e-12);
    let f = |v: f64| run.parts.recon_sq[0] / (2.0 * v * n) + 0.5 * d * v.ln();
    assert!(f(star * 1.01) > f(star));
    assert!(f(star * 0.99) > f(star));
    assert_eq!(run.sigma2, run.parts.sigma2);
}

// --- baseline-specific structure ---

#[test]
fn commitment_scales_linearly_with_beta() {
    let lo = toy_cfg("vqvae2", Some("injected"), "beta = 0.25");
    let hi = toy_cfg("vqvae2", Some("injected"), "beta = 0.75");
    let run_lo = run_eval(&lo, false);
    let run_hi = run_eval(&hi, false);
    assert_eq!(run_lo.parts.commit, run_hi.parts.commit, "forward should not see beta");
    let commit_sum: f64 = run_lo.parts.commit.iter().sum();
    let n = run_lo.trace.batch as f64;
    let expect = run_lo.parts.value + 0.5 * commit_sum / n;
    assert!((run_hi.parts.value - expect).abs() < 1e-12);
}

#[test]
fn baseline_codebooks_receive_no_loss_gradient() {
    for cfg in [toy_cfg("vqvae2", Some("injected"), ""), toy_cfg("rqvae", Some("residual"), "")]
    {
        let run = run_eval(&cfg, false);
        let grads = run.g.backward(run.parts.total, &run.store).unwrap();
        for &id in &all_ids(&run.store) {
            let name = run.store.name(id).to_string();
            if !name.starts_with("codebook/") {
                continue;
            }
            let flat = grads.get(id).map_or(0.0, |t| t.data().iter().map(|v| v.abs()).sum());
            assert_eq!(flat, 0.0, "{name} picked up gradient {flat}");
        }
        // but the encoder still learns through the commitment pull
        let stem = run.store.id("enc/stem/w").unwrap();
        let stem_grad: f64 =
            grads.get(stem).unwrap().data().iter().map(|v| v.abs()).sum();
        assert!(stem_grad > 0.0);
    }
}

// --- EMA codebook statistics ---

#[test]
fn moving_averages_follow_the_decay_recursion() {
    let cfg = toy_cfg("vqvae", None, "ema_decay = 0.9");
    let shape = cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_params::<f64>(&cfg, &shape, &mut rng).unwrap();
    let name = codebook_name(&cfg, 0);
    let init_rows = store.get(store.id(&name).unwrap()).data().to_vec();
    let mut ema = EmaState::new(&cfg, &store).unwrap();
    assert_eq!(ema.counts(&name).unwrap(), &[1.0; 4]);

    // three sites: codes 0, 0, 2 with distinctive feature rows
    let feats: Vec<f64> = (0..12).map(|i| i as f64 / 10.0).collect();
    let batch = vec![(0usize, vec![0u32, 0, 2], feats.clone())];
    ema.update(&cfg, &mut store, &batch).unwrap();

    let g = 0.9;
    let expect_counts = [g + 0.1 * 2.0, g, g + 0.1, g];
    for (got, want) in ema.counts(&name).unwrap().iter().zip(expect_counts) {
        assert!((got - want).abs() < 1e-12, "count {got} vs {want}");
    }
    let cb = store.get(store.id(&name).unwrap()).data().to_vec();
    for j in 0..4 {
        // code 0 absorbed rows 0 and 1
        let sum = g * init_rows[j] + 0.1 * (feats[j] + feats[4 + j]);
        let want = sum / expect_counts[0];
        assert!((cb[j] - want).abs() < 1e-12, "row 0 col {j}: {} vs {want}", cb[j]);
        // code 1 saw nothing: the ratio stays at its initial row
        let want1 = g * init_rows[4 + j] / g;
        assert!((cb[4 + j] - want1).abs() < 1e-12);
        // code 2 absorbed row 2
        let sum2 = g * init_rows[8 + j] + 0.1 * feats[8 + j];
        assert!((cb[8 + j] - sum2 / expect_counts[2]).abs() < 1e-12);
    }

    // a second update folds the same recursion once more
    ema.update(&cfg, &mut store, &batch).unwrap();
    let twice = g * expect_counts[0] + 0.1 * 2.0;
    assert!((ema.counts(&name).unwrap()[0] - twice).abs() < 1e-12);
}

#[test]
fn dead_codes_reseed_from_quantizer_inputs() {
    let cfg = toy_cfg("vqvae", None, "ema_decay = 0.5");
    let shape = cfg.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = init_params::<f64>(&cfg, &shape, &mut rng).unwrap();
    let name = codebook_name(&cfg, 0);
    let mut ema = EmaState::new(&cfg, &store).unwrap();

    // fresh state: every count sits exactly at the threshold, nothing resets
    let feats: Vec<f64> = (0..8).map(|i| 7.0 + i as f64).collect();
    let batch = vec![(0usize, vec![0u32, 0], feats.clone())];
    let resets = ema.reset_dead_codes(&cfg, &mut store, &batch, &mut rng).unwrap();
    assert_eq!(resets, 0);

    // after one update only code 0 was fed; the other three decay below 1
    ema.update(&cfg, &mut store, &batch).unwrap();
    let counts = ema.counts(&name).unwrap().to_vec();
    assert!(counts[0] > 1.0 && counts[1] < 1.0);
    let resets = ema.reset_dead_codes(&cfg, &mut store, &batch, &mut rng).unwrap();
    assert_eq!(resets, 3);

    let counts = ema.counts(&name).unwrap();
    let cb = store.get(store.id(&name).unwrap()).data();
    let rows: Vec<&[f64]> = feats.chunks(4).collect();
    for k in 1..4 {
        assert_eq!(counts[k], 1.0, "reset code {k} restarts its count");
        let row = &cb[k * 4..(k + 1) * 4];
        assert!(
            rows.iter().any(|r| r.iter().zip(row).all(|(a, b)| a == b)),
            "code {k} should be a copy of some quantizer input row, got {row:?}"
        );
    }
    // the fed code kept its EMA ratio
    assert!(counts[0] > 1.0);
}

// --- non-finite detection ---

#[test]
fn non_finite_terms_are_reported_by_name() {
    let cfg = toy_cfg("sqvae2", Some("injected"), "");
    let run = run_eval(&cfg, false);
    assert_eq!(run.parts.non_finite_term(), None);
    assert!(check_finite(&run.parts, 7).is_ok());

    let mut parts = run.parts;
    parts.gap[1] = f64::NAN;
    assert_eq!(parts.non_finite_term().as_deref(), Some("gap[1]"));
    parts.gap[1] = 0.0;
    parts.s2[0] = -2.0;
    assert_eq!(parts.non_finite_term().as_deref(), Some("s2[0]"));
    parts.s2[0] = 1.0;
    parts.recon_sq[0] = f64::INFINITY;
    assert_eq!(parts.non_finite_term().as_deref(), Some("recon[0]"));
    parts.recon_sq[0] = 1.0;

    parts.value = f64::NAN;
    let err = check_finite(&parts, 42).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let msg = err.to_string();
    assert!(msg.contains("42") && msg.contains("total"), "message: {msg}");
}
