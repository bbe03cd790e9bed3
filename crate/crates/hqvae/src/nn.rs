//! Model assembly: bottom-up feature pyramid, grouped top-down path with
//! per-layer quantization, and the decoder. One code path serves all
//! variants; they differ only in grouping (from the config) and in whether
//! layers quantize stochastically or by straight-through nearest neighbor.

use hqvae_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Shape, Variant};
use crate::error::{Error, Result};
use crate::quant;

/// How layers draw code assignments during a forward pass.
pub enum SampleMode<'a> {
    /// Gumbel-softmax relaxation at temperature tau (training).
    Relaxed { tau: f64 },
    /// Exact categorical sample via Gumbel argmax (Monte-Carlo estimates).
    Hard,
    /// Externally fixed assignments, one index vector per layer.
    Forced(&'a [Vec<u32>]),
    /// Deterministic argmax of the posterior (evaluation).
    Eval,
    /// Baselines only: straight-through constants pinned at a reference
    /// point, making the objective a smooth function of the parameters whose
    /// exact gradient is the straight-through one. Gradient checks only.
    Pinned(&'a PinnedSte),
}

/// Constants captured from a baseline forward pass by [`capture_pinned`].
pub struct PinnedSte {
    /// Assignments per layer.
    pub idx: Vec<Vec<u32>>,
    /// Per layer [S, d_b]: value of z - zhat (the straight-through jump).
    pub deltas: Vec<Tensor<f64>>,
    /// Per layer [S, d_b]: the detached commitment target (code rows, or
    /// cumulative code sums for the residual family).
    pub commits: Vec<Tensor<f64>>,
    /// Per group [S, d_b]: value of the decoded sites minus the target
    /// (the residual family's group-level straight-through jump).
    pub group_deltas: Vec<Tensor<f64>>,
}

pub struct LayerTrace {
    /// Quantizer input, as sites [S, d_b].
    pub zhat: Var,
    /// Code sites entering downstream sums and the decoder.
    pub z: Var,
    /// Posterior logits [S, K] (stochastic layers).
    pub logits: Option<Var>,
    /// Summed posterior entropy over sites, [1] (stochastic layers).
    pub entropy: Option<Var>,
    /// s^2 = exp(log_s2), [1] (stochastic layers).
    pub s2: Option<Var>,
    /// Hard assignment per site (all modes except Relaxed; baselines always).
    pub idx: Option<Vec<u32>>,
    /// Posterior row probabilities snapshot (all modes except Relaxed).
    pub probs: Option<Tensor<f64>>,
    /// Commitment numerator for this layer, [1] (baselines).
    pub commit_sq: Option<Var>,
}

pub struct GroupTrace {
    /// The target the group's codes approximate, as sites [S, d_b].
    pub target: Var,
    /// Plain sum of the group's code sites [S, d_b] (no straight-through).
    pub y_sites: Var,
    /// The group's contribution to the top-down state [N, d_b, s, s].
    pub y: Var,
    pub size: usize,
    pub layers: std::ops::Range<usize>,
}

pub struct ForwardTrace {
    pub x: Var,
    pub recon: Var,
    /// Reconstructions decoded from code prefixes 1..=l, one per layer
    /// (missing codes are zero); last equals `recon`. Filled on request.
    pub prefix_recons: Vec<Var>,
    pub layers: Vec<LayerTrace>,
    pub groups: Vec<GroupTrace>,
    pub batch: usize,
}

enum Init {
    He { fan_in: usize },
    Codebook { d_b: usize },
    Const(f64),
    Zero,
}

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    init: Init,
}

fn log2_ratio(num: usize, den: usize) -> usize {
    debug_assert!(num % den == 0 && (num / den).is_power_of_two());
    (num / den).trailing_zeros() as usize
}

fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, oc: usize, ic: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}/w"),
        dims: vec![oc, ic, k, k],
        init: Init::He { fan_in: ic * k * k },
    });
    out.push(ParamSpec { name: format!("{prefix}/b"), dims: vec![oc], init: Init::Zero });
}

fn resblock_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_b: usize) {
    let mid = (d_b / 2).max(1);
    conv_spec(out, &format!("{prefix}/c1"), mid, d_b, 1);
    conv_spec(out, &format!("{prefix}/c2"), mid, mid, 3);
    conv_spec(out, &format!("{prefix}/c3"), mid, mid, 3);
    conv_spec(out, &format!("{prefix}/c4"), d_b, mid, 1);
}

/// Encoder stage layout between feature captures: a stage with p >= 1 pools
/// runs n resblocks after each pool; a stage with none runs n resblocks flat.
fn stage_blocks(pools: usize, n: usize) -> usize {
    if pools == 0 {
        n
    } else {
        pools * n
    }
}

fn param_specs(cfg: &RunConfig, shape: &Shape) -> Vec<ParamSpec> {
    let d_b = cfg.model.d_b;
    let n = cfg.model.resblocks;
    let rc = shape.groups.len();
    let finest = shape.groups[rc - 1].size;
    let mut specs = Vec::new();

    // bottom-up path
    if shape.in_h == finest {
        conv_spec(&mut specs, "enc/stem", d_b, shape.in_c, 3);
    } else {
        conv_spec(&mut specs, "enc/stem", d_b, shape.in_c, 4);
    }
    let mut cur = if shape.in_h == finest { shape.in_h } else { shape.in_h / 2 };
    for gi in (0..rc).rev() {
        let pools = log2_ratio(cur, shape.groups[gi].size);
        for i in 0..stage_blocks(pools, n) {
            resblock_specs(&mut specs, &format!("enc/g{}/res{}", gi + 1, i), d_b);
        }
        cur = shape.groups[gi].size;
    }

    // top-down blocks below the coarsest group
    for gi in 1..rc {
        let ups = log2_ratio(shape.groups[gi].size, shape.groups[gi - 1].size);
        for j in 0..ups.max(1) {
            conv_spec(&mut specs, &format!("td/g{}/up{}", gi + 1, j), d_b, d_b, 3);
        }
        conv_spec(&mut specs, &format!("td/g{}/in", gi + 1), d_b, 2 * d_b, 1);
        for i in 0..n {
            resblock_specs(&mut specs, &format!("td/g{}/res{}", gi + 1, i), d_b);
        }
    }

    // decoder
    for i in 0..n {
        resblock_specs(&mut specs, &format!("dec/res{i}"), d_b);
    }
    for j in 0..log2_ratio(shape.in_h, finest) {
        conv_spec(&mut specs, &format!("dec/up{j}"), d_b, d_b, 3);
    }
    conv_spec(&mut specs, "dec/out", shape.in_c, d_b, 3);

    // codebooks and quantizer variances
    if cfg.model.shared_codebook {
        specs.push(ParamSpec {
            name: "codebook/shared/vectors".into(),
            dims: vec![cfg.model.layer[0].k, d_b],
            init: Init::Codebook { d_b },
        });
    } else {
        for (l, spec) in cfg.model.layer.iter().enumerate() {
            specs.push(ParamSpec {
                name: format!("codebook/{}/vectors", l + 1),
                dims: vec![spec.k, d_b],
                init: Init::Codebook { d_b },
            });
        }
    }
    if cfg.model.variant.is_stochastic() {
        for l in 0..cfg.model.layer.len() {
            specs.push(ParamSpec {
                name: format!("codebook/{}/log_s2", l + 1),
                dims: vec![1],
                init: Init::Const(cfg.model.s2_init.ln()),
            });
        }
    }
    specs
}

pub fn init_params<T: Scalar>(
    cfg: &RunConfig,
    shape: &Shape,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in param_specs(cfg, shape) {
        let elems: usize = spec.dims.iter().product();
        let mut data = Vec::with_capacity(elems);
        match spec.init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                for _ in 0..elems {
                    data.push(T::from_f64(std * quant::normal_draw(rng)));
                }
            }
            Init::Codebook { d_b } => {
                let std = 1.0 / (d_b as f64).sqrt();
                for _ in 0..elems {
                    data.push(T::from_f64(std * quant::normal_draw(rng)));
                }
            }
            Init::Const(v) => data.resize(elems, T::from_f64(v)),
            Init::Zero => data.resize(elems, T::ZERO),
        }
        store.insert(&spec.name, Tensor::from_vec(&spec.dims, data)?)?;
    }
    Ok(store)
}

pub fn codebook_name(cfg: &RunConfig, l: usize) -> String {
    if cfg.model.shared_codebook {
        "codebook/shared/vectors".into()
    } else {
        format!("codebook/{}/vectors", l + 1)
    }
}

fn pvar<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(store, store.id(name)?))
}

fn conv_fwd<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = pvar(g, store, &format!("{prefix}/w"))?;
    let b = pvar(g, store, &format!("{prefix}/b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    Ok(g.add_chan_bias(y, b)?)
}

fn resblock_fwd<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let a = g.gelu(x);
    let a = conv_fwd(g, store, &format!("{prefix}/c1"), a, 1, 0)?;
    let a = g.gelu(a);
    let a = conv_fwd(g, store, &format!("{prefix}/c2"), a, 1, 1)?;
    let a = g.gelu(a);
    let a = conv_fwd(g, store, &format!("{prefix}/c3"), a, 1, 1)?;
    let a = g.gelu(a);
    let a = conv_fwd(g, store, &format!("{prefix}/c4"), a, 1, 0)?;
    Ok(g.add(x, a)?)
}

/// Bottom-up features, one per group, coarsest first.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    shape: &Shape,
    x: Var,
) -> Result<Vec<Var>> {
    let n = cfg.model.resblocks;
    let rc = shape.groups.len();
    let finest = shape.groups[rc - 1].size;
    let mut cur;
    let mut h = if shape.in_h == finest {
        cur = shape.in_h;
        conv_fwd(g, store, "enc/stem", x, 1, 1)?
    } else {
        cur = shape.in_h / 2;
        conv_fwd(g, store, "enc/stem", x, 2, 1)?
    };
    let mut feats = vec![None; rc];
    for gi in (0..rc).rev() {
        let pools = log2_ratio(cur, shape.groups[gi].size);
        let mut block = 0;
        if pools == 0 {
            for _ in 0..n {
                h = resblock_fwd(g, store, &format!("enc/g{}/res{block}", gi + 1), h)?;
                block += 1;
            }
        } else {
            for _ in 0..pools {
                h = g.avg_pool2(h)?;
                for _ in 0..n {
                    h = resblock_fwd(g, store, &format!("enc/g{}/res{block}", gi + 1), h)?;
                    block += 1;
                }
            }
        }
        cur = shape.groups[gi].size;
        feats[gi] = Some(h);
    }
    Ok(feats.into_iter().map(|f| f.expect("every group captured")).collect())
}

/// Learned upsampling of the top-down state into group gi's resolution.
fn upblock<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    shape: &Shape,
    gi: usize,
    state: Var,
) -> Result<Var> {
    let ups = log2_ratio(shape.groups[gi].size, shape.groups[gi - 1].size);
    let mut s = state;
    if ups == 0 {
        s = conv_fwd(g, store, &format!("td/g{}/up0", gi + 1), s, 1, 1)?;
    } else {
        for j in 0..ups {
            s = g.upsample_nearest2(s)?;
            s = conv_fwd(g, store, &format!("td/g{}/up{j}", gi + 1), s, 1, 1)?;
        }
    }
    Ok(s)
}

/// Encoding block of an injected group: fuse the upsampled state with the
/// bottom-up feature of the same resolution.
fn inject_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    gi: usize,
    upfeat: Var,
    h: Var,
) -> Result<Var> {
    let cat = g.concat_channels(upfeat, h)?;
    let mut e = conv_fwd(g, store, &format!("td/g{}/in", gi + 1), cat, 1, 0)?;
    for i in 0..cfg.model.resblocks {
        e = resblock_fwd(g, store, &format!("td/g{}/res{i}", gi + 1), e)?;
    }
    Ok(e)
}

/// Decoder tail from the finest-group state to image space.
fn decode_tail<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    shape: &Shape,
    state: Var,
) -> Result<Var> {
    let mut s = state;
    for i in 0..cfg.model.resblocks {
        s = resblock_fwd(g, store, &format!("dec/res{i}"), s)?;
    }
    let finest = shape.groups[shape.groups.len() - 1].size;
    for j in 0..log2_ratio(shape.in_h, finest) {
        s = g.upsample_nearest2(s)?;
        s = conv_fwd(g, store, &format!("dec/up{j}"), s, 1, 1)?;
        s = g.gelu(s);
    }
    conv_fwd(g, store, "dec/out", s, 1, 1)
}

fn probs_from_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<f64> {
    let (s, k) = (logits.dims()[0], logits.dims()[1]);
    let mut out = Tensor::<f64>::zeros(&[s, k]);
    for i in 0..s {
        let row: Vec<f64> = logits.data()[i * k..(i + 1) * k].iter().map(|v| v.to_f64()).collect();
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.data_mut()[i * k + j] = e / z;
        }
    }
    out
}

fn quantize_stochastic<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    l: usize,
    zhat: Var,
    mode: &SampleMode<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<LayerTrace> {
    let cb = pvar(g, store, &codebook_name(cfg, l))?;
    let log_s2 = pvar(g, store, &format!("codebook/{}/log_s2", l + 1))?;
    let s2 = g.exp(log_s2);
    let d2 = g.sq_dist(zhat, cb)?;
    let neg = g.scale(d2, -1.0);
    let two_s2 = g.scale(s2, 2.0);
    let inv = g.recip(two_s2);
    let logits = g.mul_scalar_v(neg, inv)?;
    let ent_rows = g.entropy_rows(logits)?;
    let entropy = g.sum_all(ent_rows);
    let sites = g.dims(zhat)[0];
    let k = cfg.model.layer[l].k;

    let (z, idx, probs) = match mode {
        SampleMode::Relaxed { tau } => {
            let noise = quant::gumbel_matrix::<T, _>(sites, k, rng);
            let nv = g.input(noise);
            let noisy = g.add(logits, nv)?;
            let scaled = g.scale(noisy, 1.0 / tau);
            let soft = g.softmax_rows(scaled)?;
            let z = g.matmul(soft, cb, false, false)?;
            (z, None, None)
        }
        SampleMode::Hard => {
            let noise = quant::gumbel_matrix::<T, _>(sites, k, rng);
            let mut noisy = g.value(logits).clone();
            for (v, n) in noisy.data_mut().iter_mut().zip(noise.data()) {
                *v = *v + *n;
            }
            let probs = probs_from_logits(g.value(logits));
            let idx = quant::argmax_rows(&noisy)?;
            let z = g.embed_rows(cb, &idx)?;
            (z, Some(idx), Some(probs))
        }
        SampleMode::Forced(all) => {
            let probs = probs_from_logits(g.value(logits));
            let idx = all[l].clone();
            let z = g.embed_rows(cb, &idx)?;
            (z, Some(idx), Some(probs))
        }
        SampleMode::Eval => {
            let probs = probs_from_logits(g.value(logits));
            let idx = quant::argmax_rows(g.value(logits))?;
            let z = g.embed_rows(cb, &idx)?;
            (z, Some(idx), Some(probs))
        }
        SampleMode::Pinned(_) => {
            return Err(Error::config("pinned mode applies to the deterministic baselines"))
        }
    };
    Ok(LayerTrace {
        zhat,
        z,
        logits: Some(logits),
        entropy: Some(entropy),
        s2: Some(s2),
        idx,
        probs,
        commit_sq: None,
    })
}

/// Straight-through nearest-neighbor assignment. The commitment numerator is
/// filled here for the per-layer form; residual (cumulative) commitments are
/// assembled by the caller, which sees the whole group.
fn quantize_baseline<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    l: usize,
    zhat: Var,
    per_layer_ste: bool,
    pinned: Option<&PinnedSte>,
) -> Result<LayerTrace> {
    let cb = pvar(g, store, &codebook_name(cfg, l))?;
    let idx = match pinned {
        Some(p) => p.idx[l].clone(),
        None => quant::vq_nearest(g.value(zhat), store.get(store.id(&codebook_name(cfg, l))?))?,
    };
    let (z, commit_sq) = match (per_layer_ste, pinned) {
        (true, None) => {
            let embed = g.embed_rows(cb, &idx)?;
            let gap = g.sub(embed, zhat)?;
            let sg = g.detach(gap);
            let z = g.add(zhat, sg)?;
            let target = g.detach(embed);
            let diff = g.sub(zhat, target)?;
            let sq = g.mul(diff, diff)?;
            (z, Some(g.sum_all(sq)))
        }
        (true, Some(p)) => {
            let delta = g.input(tensor_from_f64::<T>(&p.deltas[l])?);
            let z = g.add(zhat, delta)?;
            let target = g.input(tensor_from_f64::<T>(&p.commits[l])?);
            let diff = g.sub(zhat, target)?;
            let sq = g.mul(diff, diff)?;
            (z, Some(g.sum_all(sq)))
        }
        (false, _) => (g.embed_rows(cb, &idx)?, None),
    };
    Ok(LayerTrace {
        zhat,
        z,
        logits: None,
        entropy: None,
        s2: None,
        idx: Some(idx),
        probs: None,
        commit_sq,
    })
}

/// Full model pass. Relaxed and Hard modes consume one Gumbel matrix per
/// stochastic layer, in layer order, from `rng`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    shape: &Shape,
    x: Tensor<T>,
    mode: &SampleMode<'_>,
    rng: &mut ChaCha8Rng,
    want_prefixes: bool,
) -> Result<ForwardTrace> {
    let batch = x.dims()[0];
    let d_b = cfg.model.d_b;
    let stochastic = cfg.model.variant.is_stochastic();
    let pinned = match mode {
        SampleMode::Pinned(p) => {
            if stochastic {
                return Err(Error::config("pinned mode applies to the deterministic baselines"));
            }
            let n_layers = cfg.model.layer.len();
            if p.idx.len() != n_layers
                || p.deltas.len() != n_layers
                || p.commits.len() != n_layers
                || p.group_deltas.len() != shape.groups.len()
            {
                return Err(Error::config("pinned constants do not match the model layout"));
            }
            for (l, idx) in p.idx.iter().enumerate() {
                if idx.len() != batch * shape.sites(l) {
                    return Err(Error::config(format!(
                        "pinned assignments for layer {} have length {}, expected {}",
                        l + 1,
                        idx.len(),
                        batch * shape.sites(l)
                    )));
                }
            }
            Some(*p)
        }
        _ => None,
    };
    let xv = g.input(x);
    let feats = encode(g, store, cfg, shape, xv)?;

    let mut layers: Vec<LayerTrace> = Vec::with_capacity(cfg.model.layer.len());
    let mut groups: Vec<GroupTrace> = Vec::with_capacity(shape.groups.len());
    // running code sum within the current group, recorded per layer for
    // prefix decoding
    let mut cum_sites: Vec<Var> = Vec::with_capacity(cfg.model.layer.len());
    let mut state: Option<Var> = None;

    for (gi, group) in shape.groups.iter().enumerate() {
        let s = group.size;
        let target = if gi == 0 {
            g.to_sites(feats[0])?
        } else {
            let up = upblock(g, store, shape, gi, state.expect("state set by group 0"))?;
            let enc = inject_block(g, store, cfg, gi, up, feats[gi])?;
            state = Some(up);
            g.to_sites(enc)?
        };

        let members: Vec<usize> = group.layers.clone().collect();
        let mut assigned: Option<Var> = None;
        for &l in &members {
            let zhat = match assigned {
                None => target,
                Some(sum) => g.sub(target, sum)?,
            };
            let trace = if stochastic {
                quantize_stochastic(g, store, cfg, l, zhat, mode, rng)?
            } else {
                let per_layer = cfg.model.variant != Variant::Rqvae;
                quantize_baseline(g, store, cfg, l, zhat, per_layer, pinned)?
            };
            assigned = Some(match assigned {
                None => trace.z,
                Some(sum) => g.add(sum, trace.z)?,
            });
            cum_sites.push(assigned.expect("just set"));
            layers.push(trace);
        }
        let y_sites = assigned.expect("group has at least one layer");
        let mut decode_sites = y_sites;

        if cfg.model.variant == Variant::Rqvae {
            // straight-through on the group sum, commitments on cumulative sums
            match pinned {
                None => {
                    let gap = g.sub(y_sites, target)?;
                    let sg = g.detach(gap);
                    decode_sites = g.add(target, sg)?;
                    for &l in &members {
                        let cum = cum_sites[l];
                        let sgc = g.detach(cum);
                        let diff = g.sub(target, sgc)?;
                        let sq = g.mul(diff, diff)?;
                        layers[l].commit_sq = Some(g.sum_all(sq));
                    }
                }
                Some(p) => {
                    let jump = g.input(tensor_from_f64::<T>(&p.group_deltas[gi])?);
                    decode_sites = g.add(target, jump)?;
                    for &l in &members {
                        let cum = g.input(tensor_from_f64::<T>(&p.commits[l])?);
                        let diff = g.sub(target, cum)?;
                        let sq = g.mul(diff, diff)?;
                        layers[l].commit_sq = Some(g.sum_all(sq));
                    }
                }
            }
        }

        let y = g.from_sites(decode_sites, batch, d_b, s, s)?;
        let new_state = match (gi, state) {
            (0, _) => y,
            (_, Some(up)) => g.add(up, y)?,
            _ => unreachable!(),
        };
        state = Some(new_state);
        groups.push(GroupTrace { target, y_sites, y, size: s, layers: group.layers.clone() });
    }

    let recon = decode_tail(g, store, cfg, shape, state.expect("at least one group"))?;
    let mut prefix_recons = Vec::new();
    if want_prefixes {
        let count = layers.len();
        for j in 0..count {
            if j == count - 1 {
                prefix_recons.push(recon);
                continue;
            }
            let mut st: Option<Var> = None;
            for (gi, group) in shape.groups.iter().enumerate() {
                let up = match st {
                    None => None,
                    Some(prev) => Some(upblock(g, store, shape, gi, prev)?),
                };
                let contrib = if group.layers.start > j {
                    None
                } else if group.layers.end - 1 <= j {
                    Some(groups[gi].y)
                } else {
                    let sites = cum_sites[j];
                    Some(g.from_sites(sites, batch, d_b, group.size, group.size)?)
                };
                st = Some(match (up, contrib) {
                    (None, Some(c)) => c,
                    (Some(u), Some(c)) => g.add(u, c)?,
                    (Some(u), None) => u,
                    (None, None) => unreachable!("the first group always contributes"),
                });
            }
            let st = st.expect("at least one group");
            prefix_recons.push(decode_tail(g, store, cfg, shape, st)?);
        }
    }

    Ok(ForwardTrace { x: xv, recon, prefix_recons, layers, groups, batch })
}

/// Decode externally supplied code indices (prior samples, dumps): builds
/// each group's code sum and folds the same top-down state path as `forward`.
fn tensor_from_f64<T: Scalar>(t: &Tensor<f64>) -> Result<Tensor<T>> {
    Ok(Tensor::from_f64_slice(t.dims(), t.data())?)
}

fn value64<T: Scalar>(g: &Graph<T>, v: Var) -> Tensor<f64> {
    let t = g.value(v);
    let data: Vec<f64> = t.data().iter().map(|x| x.to_f64()).collect();
    Tensor::from_vec(t.dims(), data).expect("same element count")
}

/// Capture straight-through constants from a baseline forward pass at the
/// current parameters, for use with [`SampleMode::Pinned`].
pub fn capture_pinned<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    shape: &Shape,
    trace: &ForwardTrace,
) -> Result<PinnedSte> {
    if cfg.model.variant.is_stochastic() {
        return Err(Error::config("pinned constants apply to the deterministic baselines"));
    }
    let d_b = cfg.model.d_b;
    let mut idx = Vec::with_capacity(trace.layers.len());
    let mut deltas = Vec::with_capacity(trace.layers.len());
    let mut commits = Vec::with_capacity(trace.layers.len());
    let mut group_deltas = Vec::with_capacity(trace.groups.len());

    for (gi, group) in shape.groups.iter().enumerate() {
        let target = value64(g, trace.groups[gi].target);
        let mut cum = Tensor::<f64>::zeros(target.dims());
        for l in group.layers.clone() {
            let lt = &trace.layers[l];
            let assigned =
                lt.idx.clone().ok_or_else(|| Error::config("assignments missing from trace"))?;
            let zhat = value64(g, lt.zhat);
            let z = value64(g, lt.z);
            for (c, v) in cum.data_mut().iter_mut().zip(z.data()) {
                *c += v;
            }
            let commit = if cfg.model.variant == Variant::Rqvae {
                cum.clone()
            } else {
                // exact code rows for the per-layer commitment target
                let cb = store.get(store.id(&codebook_name(cfg, l))?);
                let mut rows = Tensor::<f64>::zeros(&[assigned.len(), d_b]);
                for (i, &k) in assigned.iter().enumerate() {
                    for t in 0..d_b {
                        rows.data_mut()[i * d_b + t] = cb.data()[k as usize * d_b + t].to_f64();
                    }
                }
                rows
            };
            let mut delta = z;
            for (d, v) in delta.data_mut().iter_mut().zip(zhat.data()) {
                *d -= v;
            }
            idx.push(assigned);
            deltas.push(delta);
            commits.push(commit);
        }
        let mut jump = value64(g, trace.groups[gi].y_sites);
        for (j, v) in jump.data_mut().iter_mut().zip(target.data()) {
            *j -= v;
        }
        group_deltas.push(jump);
    }
    Ok(PinnedSte { idx, deltas, commits, group_deltas })
}

pub fn decode_codes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    shape: &Shape,
    idx: &[Vec<u32>],
    batch: usize,
) -> Result<Var> {
    if idx.len() != cfg.model.layer.len() {
        return Err(Error::config(format!(
            "decode_codes: {} index vectors for {} layers",
            idx.len(),
            cfg.model.layer.len()
        )));
    }
    let d_b = cfg.model.d_b;
    let mut state: Option<Var> = None;
    for (gi, group) in shape.groups.iter().enumerate() {
        let s = group.size;
        let mut y_sites: Option<Var> = None;
        for l in group.layers.clone() {
            let expect = batch * s * s;
            if idx[l].len() != expect {
                return Err(Error::config(format!(
                    "decode_codes: layer {} has {} indices, expected {}",
                    l + 1,
                    idx[l].len(),
                    expect
                )));
            }
            let cb = pvar(g, store, &codebook_name(cfg, l))?;
            let z = g.embed_rows(cb, &idx[l])?;
            y_sites = Some(match y_sites {
                None => z,
                Some(sum) => g.add(sum, z)?,
            });
        }
        let y = g.from_sites(y_sites.expect("nonempty group"), batch, d_b, s, s)?;
        state = Some(match state {
            None => y,
            Some(st) => {
                let up = upblock(g, store, shape, gi, st)?;
                g.add(up, y)?
            }
        });
    }
    decode_tail(g, store, cfg, shape, state.expect("at least one group"))
}

/// Uniform prior over code indices, one vector per layer in layer order.
pub fn sample_prior(
    cfg: &RunConfig,
    shape: &Shape,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<u32>> {
    cfg.model
        .layer
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            (0..batch * shape.sites(l)).map(|_| rng.random_range(0..spec.k as u32)).collect()
        })
        .collect()
}
