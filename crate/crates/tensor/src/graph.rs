use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn i(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param { pid: u32 },
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    AddConst(u32),
    Scale(u32, f64),
    MulScalarV { x: u32, s: u32 },
    Recip(u32),
    Exp(u32),
    Ln(u32),
    Gelu(u32),
    Detach,
    Reshape { x: u32, from: Vec<usize> },
    Matmul { a: u32, b: u32, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    SqDist { feat: u32, codes: u32 },
    SoftmaxRows { x: u32 },
    EntropyRows { logits: u32 },
    SumAll(u32),
    Conv { x: u32, w: u32, dims: ConvDims },
    // dims describe the dual conv: (h, w) is the transpose output plane,
    // (oh, ow) its input plane, oc its input channels, ic its output channels.
    ConvT { x: u32, w: u32, dims: ConvDims },
    AddChanBias { x: u32, b: u32 },
    AvgPool2 { x: u32 },
    UpNearest2 { x: u32 },
    ConcatC { a: u32, b: u32, ca: usize },
    ToSites { x: u32 },
    FromSites { x: u32, n: usize, c: usize, h: usize, w: usize },
    EmbedRows { codes: u32, idx: Box<[u32]> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires: bool,
}

/// Eager tape: every op computes its value on record, `backward` replays the
/// tape once in reverse creation order (which is already topological).
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.len() != 4 {
        return Err(Error::shape(op, format!("expected 4-d [N,C,H,W], got {t:?}")));
    }
    Ok((t[0], t[1], t[2], t[3]))
}

fn dims2(t: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if t.len() != 2 {
        return Err(Error::shape(op, format!("expected 2-d matrix, got {t:?}")));
    }
    Ok((t[0], t[1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.i()].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.i()].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires: bool) -> Var {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires });
        Var(id)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.i()].requires
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(T::from_f64(v)))
    }

    /// Trainable leaf bound to a store slot; `backward` routes its gradient
    /// to the slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param { pid: id.0 }, true)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn bin_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op_name,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin_same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.i()].value.data()) {
            *x += *y;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Add(a.0, b.0), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin_same_shape("sub", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.i()].value.data()) {
            *x -= *y;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Sub(a.0, b.0), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin_same_shape("mul", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.i()].value.data()) {
            *x *= *y;
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Mul(a.0, b.0), r))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x += cv;
        }
        let r = self.req(a);
        self.push(v, Op::AddConst(a.0), r)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= cv;
        }
        let r = self.req(a);
        self.push(v, Op::Scale(a.0, c), r)
    }

    /// Broadcast-multiply by a [1]-shaped variable.
    pub fn mul_scalar_v(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.dims(s) != [1] {
            return Err(Error::ScalarExpected { op: "mul_scalar_v", dims: self.dims(s).to_vec() });
        }
        let sv = self.value(s).data()[0];
        let mut v = self.value(x).clone();
        for e in v.data_mut() {
            *e *= sv;
        }
        let r = self.req(x) || self.req(s);
        Ok(self.push(v, Op::MulScalarV { x: x.0, s: s.0 }, r))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = T::ONE / *x;
        }
        let r = self.req(a);
        self.push(v, Op::Recip(a.0), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        let r = self.req(a);
        self.push(v, Op::Exp(a.0), r)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.ln();
        }
        let r = self.req(a);
        self.push(v, Op::Ln(a.0), r)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = gelu_val(*x);
        }
        let r = self.req(a);
        self.push(v, Op::Gelu(a.0), r)
    }

    /// Identity value, zero gradient: the stop-gradient operator.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let from = self.dims(a).to_vec();
        let v = self.value(a).reshaped(dims)?;
        let r = self.req(a);
        Ok(self.push(v, Op::Reshape { x: a.0, from }, r))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// C = op(A) @ op(B) with `ta`/`tb` transposing the stored operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.dims(a), "matmul")?;
        let (br, bc) = dims2(self.dims(b), "matmul")?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {ka} vs {kb} (a {:?} ta={ta}, b {:?} tb={tb})", self.dims(a), self.dims(b)),
            ));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, ka, n, T::ONE, self.value(a).data(), ta, self.value(b).data(), tb, T::ZERO, &mut out);
        let v = Tensor::from_vec(&[m, n], out)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Matmul { a: a.0, b: b.0, ta, tb, m, k: ka, n }, r))
    }

    /// out[i, j] = ||feat_i - codes_j||^2 for feat [n, d], codes [K, d].
    pub fn sq_dist(&mut self, feat: Var, codes: Var) -> Result<Var> {
        let (n, d) = dims2(self.dims(feat), "sq_dist")?;
        let (k, dc) = dims2(self.dims(codes), "sq_dist")?;
        if d != dc {
            return Err(Error::shape("sq_dist", format!("feature dim {d} vs code dim {dc}")));
        }
        let f = self.value(feat).data();
        let c = self.value(codes).data();
        // cross = feat @ codes^T, then add the two squared-norm ranks.
        let mut out = vec![T::ZERO; n * k];
        T::gemm(n, d, k, T::from_f64(-2.0), f, false, c, true, T::ZERO, &mut out);
        let mut fsq = vec![T::ZERO; n];
        for i in 0..n {
            let row = &f[i * d..(i + 1) * d];
            let mut s = T::ZERO;
            for &x in row {
                s += x * x;
            }
            fsq[i] = s;
        }
        let mut csq = vec![T::ZERO; k];
        for j in 0..k {
            let row = &c[j * d..(j + 1) * d];
            let mut s = T::ZERO;
            for &x in row {
                s += x * x;
            }
            csq[j] = s;
        }
        for i in 0..n {
            let base = i * k;
            for j in 0..k {
                out[base + j] += fsq[i] + csq[j];
                // guard tiny negative round-off so callers can treat it as a distance
                if out[base + j] < T::ZERO {
                    out[base + j] = T::ZERO;
                }
            }
        }
        let v = Tensor::from_vec(&[n, k], out)?;
        let r = self.req(feat) || self.req(codes);
        Ok(self.push(v, Op::SqDist { feat: feat.0, codes: codes.0 }, r))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rws, c) = dims2(self.dims(x), "softmax_rows")?;
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; rws * c];
        for i in 0..rws {
            let row = &xs[i * c..(i + 1) * c];
            let o = &mut out[i * c..(i + 1) * c];
            softmax_row(row, o);
        }
        let v = Tensor::from_vec(&[rws, c], out)?;
        let r = self.req(x);
        Ok(self.push(v, Op::SoftmaxRows { x: x.0 }, r))
    }

    /// Per-row Shannon entropy (nats) of softmax(logits): [r, c] -> [r].
    pub fn entropy_rows(&mut self, logits: Var) -> Result<Var> {
        let (rws, c) = dims2(self.dims(logits), "entropy_rows")?;
        let xs = self.value(logits).data();
        let mut out = vec![T::ZERO; rws];
        let mut p = vec![T::ZERO; c];
        for i in 0..rws {
            let row = &xs[i * c..(i + 1) * c];
            softmax_row(row, &mut p);
            let lse = logsumexp_row(row);
            let mut h = T::ZERO;
            for j in 0..c {
                // ln p = logit - lse, computed from logits for stability
                h -= p[j] * (row[j] - lse);
            }
            out[i] = h;
        }
        let v = Tensor::from_vec(&[rws], out)?;
        let r = self.req(logits);
        Ok(self.push(v, Op::EntropyRows { logits: logits.0 }, r))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let r = self.req(x);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), r)
    }

    // ── convolution and shape plumbing ──────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cx, h, wd) = dims4(self.dims(x), "conv2d")?;
        let wdims = self.dims(w).to_vec();
        if wdims.len() != 4 || wdims[1] != cx {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} vs input channels {}", wdims, cx),
            ));
        }
        let (oc, kh, kw) = (wdims[0], wdims[2], wdims[3]);
        let oh = conv_out_dim_checked("conv2d", h, kh, stride, pad)?;
        let ow = conv_out_dim_checked("conv2d", wd, kw, stride, pad)?;
        let dims = ConvDims { n, ic: cx, h, w: wd, oc, kh, kw, stride, pad, oh, ow };
        let out = conv::conv_fwd(self.value(x).data(), self.value(w).data(), &dims);
        let v = Tensor::from_vec(&[n, oc, oh, ow], out)?;
        let r = self.req(x) || self.req(w);
        Ok(self.push(v, Op::Conv { x: x.0, w: w.0, dims }, r))
    }

    /// Transpose convolution; weight layout [IC, OC, KH, KW],
    /// output extent (in - 1) * stride - 2 pad + k.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cx, h, wd) = dims4(self.dims(x), "conv2d_transpose")?;
        let wdims = self.dims(w).to_vec();
        if wdims.len() != 4 || wdims[0] != cx {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("weight {:?} vs input channels {}", wdims, cx),
            ));
        }
        let (oc, kh, kw) = (wdims[1], wdims[2], wdims[3]);
        let out_h = (h - 1) * stride + kh;
        let out_w = (wd - 1) * stride + kw;
        if out_h < 2 * pad || out_w < 2 * pad {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("padding {pad} exceeds output extent {out_h}x{out_w}"),
            ));
        }
        let (out_h, out_w) = (out_h - 2 * pad, out_w - 2 * pad);
        // Dual frame: a stride-s conv maps [out_h, out_w] back to [h, wd].
        let dims = ConvDims {
            n,
            ic: oc,
            h: out_h,
            w: out_w,
            oc: cx,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let out = conv::conv_bwd_input(self.value(x).data(), self.value(w).data(), &dims);
        let v = Tensor::from_vec(&[n, oc, out_h, out_w], out)?;
        let r = self.req(x) || self.req(w);
        Ok(self.push(v, Op::ConvT { x: x.0, w: w.0, dims }, r))
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "add_chan_bias")?;
        if self.dims(b) != [c] {
            return Err(Error::shape(
                "add_chan_bias",
                format!("bias {:?} vs channels {}", self.dims(b), c),
            ));
        }
        let mut v = self.value(x).clone();
        let bs = self.nodes[b.i()].value.data().to_vec();
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let bias = bs[ci];
                for e in &mut v.data_mut()[(ni * c + ci) * plane..][..plane] {
                    *e += bias;
                }
            }
        }
        let r = self.req(x) || self.req(b);
        Ok(self.push(v, Op::AddChanBias { x: x.0, b: b.0 }, r))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let q = T::from_f64(0.25);
        for nc in 0..n * c {
            let src = &xs[nc * h * w..][..h * w];
            let dst = &mut out[nc * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * q;
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let r = self.req(x);
        Ok(self.push(v, Op::AvgPool2 { x: x.0 }, r))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xs[nc * h * w..][..h * w];
            let dst = &mut out[nc * oh * ow..][..oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    dst[2 * i * ow + 2 * j] = v;
                    dst[2 * i * ow + 2 * j + 1] = v;
                    dst[(2 * i + 1) * ow + 2 * j] = v;
                    dst[(2 * i + 1) * ow + 2 * j + 1] = v;
                }
            }
        }
        let v = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let r = self.req(x);
        Ok(self.push(v, Op::UpNearest2 { x: x.0 }, r))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = dims4(self.dims(a), "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(self.dims(b), "concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let plane = ha * wa;
        let c = ca + cb;
        let mut out = vec![T::ZERO; na * c * plane];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for n in 0..na {
            out[n * c * plane..][..ca * plane]
                .copy_from_slice(&av[n * ca * plane..][..ca * plane]);
            out[n * c * plane + ca * plane..][..cb * plane]
                .copy_from_slice(&bv[n * cb * plane..][..cb * plane]);
        }
        let v = Tensor::from_vec(&[na, c, ha, wa], out)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::ConcatC { a: a.0, b: b.0, ca }, r))
    }

    /// [N, C, H, W] -> [N*H*W, C]: one row per spatial site.
    pub fn to_sites(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.dims(x), "to_sites")?;
        let xs = self.value(x).data();
        let out = permute_to_sites(xs, n, c, h, w);
        let v = Tensor::from_vec(&[n * h * w, c], out)?;
        let r = self.req(x);
        Ok(self.push(v, Op::ToSites { x: x.0 }, r))
    }

    /// Inverse of `to_sites`.
    pub fn from_sites(&mut self, x: Var, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.dims(x), "from_sites")?;
        if rows != n * h * w || cols != c {
            return Err(Error::shape(
                "from_sites",
                format!("sites {:?} vs target [{n},{c},{h},{w}]", self.dims(x)),
            ));
        }
        let xs = self.value(x).data();
        let out = permute_from_sites(xs, n, c, h, w);
        let v = Tensor::from_vec(&[n, c, h, w], out)?;
        let r = self.req(x);
        Ok(self.push(v, Op::FromSites { x: x.0, n, c, h, w }, r))
    }

    /// Gather codebook rows by index: codes [K, d], idx len m -> [m, d].
    pub fn embed_rows(&mut self, codes: Var, idx: &[u32]) -> Result<Var> {
        let (k, d) = dims2(self.dims(codes), "embed_rows")?;
        for &i in idx {
            if i as usize >= k {
                return Err(Error::shape("embed_rows", format!("index {i} out of range {k}")));
            }
        }
        let cs = self.value(codes).data();
        let mut out = vec![T::ZERO; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&cs[i as usize * d..(i as usize + 1) * d]);
        }
        let v = Tensor::from_vec(&[idx.len(), d], out)?;
        let r = self.req(codes);
        Ok(self.push(v, Op::EmbedRows { codes: codes.0, idx: idx.into() }, r))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients land in store slots.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Grads<T>> {
        if self.value(loss).dims() != [1] {
            return Err(Error::ScalarExpected { op: "backward", dims: self.value(loss).dims().to_vec() });
        }
        if !self.req(loss) {
            return Err(Error::graph(
                "backward on a value with no parameter dependencies (detached or constant graph)",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.i()] = Some(Tensor::scalar(T::ONE));
        let mut out = Grads::zeros(store.len());

        for i in (0..=loss.i()).rev() {
            if !self.nodes[i].requires {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Detach => {}
                Op::Param { pid } => out.accumulate(ParamId(*pid), &g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    let mut n = g;
                    for x in n.data_mut() {
                        *x = -*x;
                    }
                    self.acc(&mut grads, *b, n);
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[*a as usize].value.data();
                    let vb = self.nodes[*b as usize].value.data();
                    if self.nodes[*a as usize].requires {
                        let mut ga = g.clone();
                        for (x, y) in ga.data_mut().iter_mut().zip(vb) {
                            *x *= *y;
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.nodes[*b as usize].requires {
                        let mut gb = g;
                        for (x, y) in gb.data_mut().iter_mut().zip(va) {
                            *x *= *y;
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddConst(a) => self.acc(&mut grads, *a, g),
                Op::Scale(a, c) => {
                    let cv = T::from_f64(*c);
                    let mut ga = g;
                    for x in ga.data_mut() {
                        *x *= cv;
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::MulScalarV { x, s } => {
                    let sv = self.nodes[*s as usize].value.data()[0];
                    if self.nodes[*x as usize].requires {
                        let mut gx = g.clone();
                        for e in gx.data_mut() {
                            *e *= sv;
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.nodes[*s as usize].requires {
                        let xv = self.nodes[*x as usize].value.data();
                        let mut s_acc = T::ZERO;
                        for (ge, xe) in g.data().iter().zip(xv) {
                            s_acc += *ge * *xe;
                        }
                        self.acc(&mut grads, *s, Tensor::scalar(s_acc));
                    }
                }
                Op::Recip(a) => {
                    let y = self.nodes[i].value.data();
                    let mut ga = g;
                    for (x, yv) in ga.data_mut().iter_mut().zip(y) {
                        *x = -*x * *yv * *yv;
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.data();
                    let mut ga = g;
                    for (x, yv) in ga.data_mut().iter_mut().zip(y) {
                        *x *= *yv;
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let xv = self.nodes[*a as usize].value.data();
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(xv) {
                        *x = *x / *v;
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let xv = self.nodes[*a as usize].value.data();
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(xv) {
                        *x *= gelu_grad(*v);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Reshape { x, from } => {
                    let gr = g.reshaped(from).expect("reshape grad");
                    self.acc(&mut grads, *x, gr);
                }
                Op::Matmul { a, b, ta, tb, m, k, n } => {
                    let av = self.nodes[*a as usize].value.data();
                    let bv = self.nodes[*b as usize].value.data();
                    let gv = g.data();
                    if self.nodes[*a as usize].requires {
                        let mut da = vec![T::ZERO; av.len()];
                        if !*ta {
                            // dA (m x k) = g (m x n) @ op(B)^T
                            T::gemm(*m, *n, *k, T::ONE, gv, false, bv, !*tb, T::ZERO, &mut da);
                        } else {
                            // physical A is (k x m): dA_phys = op(B) @ g^T
                            T::gemm(*k, *n, *m, T::ONE, bv, *tb, gv, true, T::ZERO, &mut da);
                        }
                        let t = Tensor::from_vec(self.nodes[*a as usize].value.dims(), da).unwrap();
                        self.acc(&mut grads, *a, t);
                    }
                    if self.nodes[*b as usize].requires {
                        let mut db = vec![T::ZERO; bv.len()];
                        if !*tb {
                            // dB (k x n) = op(A)^T @ g
                            T::gemm(*k, *m, *n, T::ONE, av, !*ta, gv, false, T::ZERO, &mut db);
                        } else {
                            // physical B is (n x k): dB_phys = g^T @ op(A)
                            T::gemm(*n, *m, *k, T::ONE, gv, true, av, *ta, T::ZERO, &mut db);
                        }
                        let t = Tensor::from_vec(self.nodes[*b as usize].value.dims(), db).unwrap();
                        self.acc(&mut grads, *b, t);
                    }
                }
                Op::SqDist { feat, codes } => {
                    let f = self.nodes[*feat as usize].value.data();
                    let c = self.nodes[*codes as usize].value.data();
                    let (n, d) = {
                        let dm = self.nodes[*feat as usize].value.dims();
                        (dm[0], dm[1])
                    };
                    let k = self.nodes[*codes as usize].value.dims()[0];
                    let gv = g.data();
                    let mut growsum = vec![T::ZERO; n];
                    let mut gcolsum = vec![T::ZERO; k];
                    for i2 in 0..n {
                        for j in 0..k {
                            let gij = gv[i2 * k + j];
                            growsum[i2] += gij;
                            gcolsum[j] += gij;
                        }
                    }
                    if self.nodes[*feat as usize].requires {
                        // df = 2 (rowsum .* f - g @ c)
                        let mut df = vec![T::ZERO; n * d];
                        T::gemm(n, k, d, T::from_f64(-2.0), gv, false, c, false, T::ZERO, &mut df);
                        for i2 in 0..n {
                            let w = growsum[i2] + growsum[i2];
                            for j in 0..d {
                                df[i2 * d + j] += w * f[i2 * d + j];
                            }
                        }
                        let t = Tensor::from_vec(&[n, d], df).unwrap();
                        self.acc(&mut grads, *feat, t);
                    }
                    if self.nodes[*codes as usize].requires {
                        // dc = 2 (colsum .* c - g^T @ f)
                        let mut dc = vec![T::ZERO; k * d];
                        T::gemm(k, n, d, T::from_f64(-2.0), gv, true, f, false, T::ZERO, &mut dc);
                        for j in 0..k {
                            let w = gcolsum[j] + gcolsum[j];
                            for l in 0..d {
                                dc[j * d + l] += w * c[j * d + l];
                            }
                        }
                        let t = Tensor::from_vec(&[k, d], dc).unwrap();
                        self.acc(&mut grads, *codes, t);
                    }
                }
                Op::SoftmaxRows { x } => {
                    let y = self.nodes[i].value.data();
                    let dims = self.nodes[i].value.dims();
                    let (rws, c) = (dims[0], dims[1]);
                    let gv = g.data();
                    let mut dx = vec![T::ZERO; rws * c];
                    for r2 in 0..rws {
                        let yr = &y[r2 * c..(r2 + 1) * c];
                        let gr = &gv[r2 * c..(r2 + 1) * c];
                        let mut dot = T::ZERO;
                        for j in 0..c {
                            dot += yr[j] * gr[j];
                        }
                        let dr = &mut dx[r2 * c..(r2 + 1) * c];
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let t = Tensor::from_vec(&[rws, c], dx).unwrap();
                    self.acc(&mut grads, *x, t);
                }
                Op::EntropyRows { logits } => {
                    let lg = self.nodes[*logits as usize].value.data();
                    let dims = self.nodes[*logits as usize].value.dims();
                    let (rws, c) = (dims[0], dims[1]);
                    let hv = self.nodes[i].value.data();
                    let gv = g.data();
                    let mut dx = vec![T::ZERO; rws * c];
                    let mut p = vec![T::ZERO; c];
                    for r2 in 0..rws {
                        let row = &lg[r2 * c..(r2 + 1) * c];
                        softmax_row(row, &mut p);
                        let lse = logsumexp_row(row);
                        let gi = gv[r2];
                        let h = hv[r2];
                        let dr = &mut dx[r2 * c..(r2 + 1) * c];
                        for j in 0..c {
                            let lnp = row[j] - lse;
                            dr[j] = -gi * p[j] * (lnp + h);
                        }
                    }
                    let t = Tensor::from_vec(&[rws, c], dx).unwrap();
                    self.acc(&mut grads, *logits, t);
                }
                Op::SumAll(x) => {
                    let gs = g.data()[0];
                    let src = &self.nodes[*x as usize].value;
                    let t = Tensor::full(src.dims(), gs);
                    self.acc(&mut grads, *x, t);
                }
                Op::Conv { x, w, dims } => {
                    let xv = self.nodes[*x as usize].value.data();
                    let wv = self.nodes[*w as usize].value.data();
                    let gv = g.data();
                    if self.nodes[*x as usize].requires {
                        let dx = conv::conv_bwd_input(gv, wv, dims);
                        let t = Tensor::from_vec(self.nodes[*x as usize].value.dims(), dx).unwrap();
                        self.acc(&mut grads, *x, t);
                    }
                    if self.nodes[*w as usize].requires {
                        let dw = conv::conv_bwd_weight(xv, gv, dims);
                        let t = Tensor::from_vec(self.nodes[*w as usize].value.dims(), dw).unwrap();
                        self.acc(&mut grads, *w, t);
                    }
                }
                Op::ConvT { x, w, dims } => {
                    let xv = self.nodes[*x as usize].value.data();
                    let wv = self.nodes[*w as usize].value.data();
                    let gv = g.data();
                    if self.nodes[*x as usize].requires {
                        let dx = conv::conv_fwd(gv, wv, dims);
                        let t = Tensor::from_vec(self.nodes[*x as usize].value.dims(), dx).unwrap();
                        self.acc(&mut grads, *x, t);
                    }
                    if self.nodes[*w as usize].requires {
                        let dw = conv::conv_bwd_weight(gv, xv, dims);
                        let t = Tensor::from_vec(self.nodes[*w as usize].value.dims(), dw).unwrap();
                        self.acc(&mut grads, *w, t);
                    }
                }
                Op::AddChanBias { x, b } => {
                    if self.nodes[*x as usize].requires {
                        self.acc(&mut grads, *x, g.clone());
                    }
                    if self.nodes[*b as usize].requires {
                        let dims = self.nodes[*x as usize].value.dims();
                        let (n, c, h, w2) = (dims[0], dims[1], dims[2], dims[3]);
                        let plane = h * w2;
                        let gv = g.data();
                        let mut db = vec![T::ZERO; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let mut s = T::ZERO;
                                for e in &gv[(ni * c + ci) * plane..][..plane] {
                                    s += *e;
                                }
                                db[ci] += s;
                            }
                        }
                        let t = Tensor::from_vec(&[c], db).unwrap();
                        self.acc(&mut grads, *b, t);
                    }
                }
                Op::AvgPool2 { x } => {
                    let dims = self.nodes[*x as usize].value.dims();
                    let (n, c, h, w2) = (dims[0], dims[1], dims[2], dims[3]);
                    let (oh, ow) = (h / 2, w2 / 2);
                    let gv = g.data();
                    let mut dx = vec![T::ZERO; n * c * h * w2];
                    let q = T::from_f64(0.25);
                    for nc in 0..n * c {
                        let src = &gv[nc * oh * ow..][..oh * ow];
                        let dst = &mut dx[nc * h * w2..][..h * w2];
                        for i2 in 0..oh {
                            for j in 0..ow {
                                let v = src[i2 * ow + j] * q;
                                dst[2 * i2 * w2 + 2 * j] = v;
                                dst[2 * i2 * w2 + 2 * j + 1] = v;
                                dst[(2 * i2 + 1) * w2 + 2 * j] = v;
                                dst[(2 * i2 + 1) * w2 + 2 * j + 1] = v;
                            }
                        }
                    }
                    let t = Tensor::from_vec(dims, dx).unwrap();
                    self.acc(&mut grads, *x, t);
                }
                Op::UpNearest2 { x } => {
                    let dims = self.nodes[*x as usize].value.dims();
                    let (n, c, h, w2) = (dims[0], dims[1], dims[2], dims[3]);
                    let (oh, ow) = (2 * h, 2 * w2);
                    let gv = g.data();
                    let mut dx = vec![T::ZERO; n * c * h * w2];
                    for nc in 0..n * c {
                        let src = &gv[nc * oh * ow..][..oh * ow];
                        let dst = &mut dx[nc * h * w2..][..h * w2];
                        for i2 in 0..h {
                            for j in 0..w2 {
                                dst[i2 * w2 + j] = src[2 * i2 * ow + 2 * j]
                                    + src[2 * i2 * ow + 2 * j + 1]
                                    + src[(2 * i2 + 1) * ow + 2 * j]
                                    + src[(2 * i2 + 1) * ow + 2 * j + 1];
                            }
                        }
                    }
                    let t = Tensor::from_vec(dims, dx).unwrap();
                    self.acc(&mut grads, *x, t);
                }
                Op::ConcatC { a, b, ca } => {
                    let adims = self.nodes[*a as usize].value.dims().to_vec();
                    let bdims = self.nodes[*b as usize].value.dims().to_vec();
                    let (n, c_all, h, w2) = {
                        let d = self.nodes[i].value.dims();
                        (d[0], d[1], d[2], d[3])
                    };
                    let cb = c_all - ca;
                    let plane = h * w2;
                    let gv = g.data();
                    if self.nodes[*a as usize].requires {
                        let mut da = vec![T::ZERO; n * ca * plane];
                        for ni in 0..n {
                            da[ni * ca * plane..][..ca * plane]
                                .copy_from_slice(&gv[ni * c_all * plane..][..ca * plane]);
                        }
                        self.acc(&mut grads, *a, Tensor::from_vec(&adims, da).unwrap());
                    }
                    if self.nodes[*b as usize].requires {
                        let mut db = vec![T::ZERO; n * cb * plane];
                        for ni in 0..n {
                            db[ni * cb * plane..][..cb * plane]
                                .copy_from_slice(&gv[ni * c_all * plane + ca * plane..][..cb * plane]);
                        }
                        self.acc(&mut grads, *b, Tensor::from_vec(&bdims, db).unwrap());
                    }
                }
                Op::ToSites { x } => {
                    let dims = self.nodes[*x as usize].value.dims();
                    let (n, c, h, w2) = (dims[0], dims[1], dims[2], dims[3]);
                    let dx = permute_from_sites(g.data(), n, c, h, w2);
                    self.acc(&mut grads, *x, Tensor::from_vec(dims, dx).unwrap());
                }
                Op::FromSites { x, n, c, h, w } => {
                    let dx = permute_to_sites(g.data(), *n, *c, *h, *w);
                    let t = Tensor::from_vec(&[n * h * w, *c], dx).unwrap();
                    self.acc(&mut grads, *x, t);
                }
                Op::EmbedRows { codes, idx } => {
                    let cdims = self.nodes[*codes as usize].value.dims().to_vec();
                    let d = cdims[1];
                    let gv = g.data();
                    let mut dc = vec![T::ZERO; cdims[0] * d];
                    for (r2, &ix) in idx.iter().enumerate() {
                        let dst = &mut dc[ix as usize * d..(ix as usize + 1) * d];
                        let src = &gv[r2 * d..(r2 + 1) * d];
                        for (a2, b2) in dst.iter_mut().zip(src) {
                            *a2 += *b2;
                        }
                    }
                    self.acc(&mut grads, *codes, Tensor::from_vec(&cdims, dc).unwrap());
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], target: u32, g: Tensor<T>) {
        if !self.nodes[target as usize].requires {
            return;
        }
        match &mut grads[target as usize] {
            slot @ None => *slot = Some(g),
            Some(acc) => {
                debug_assert_eq!(acc.dims(), g.dims());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}

fn conv_out_dim_checked(op: &'static str, inp: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    conv::conv_out_dim(inp, k, s, p).ok_or_else(|| {
        Error::shape(op, format!("extent {inp} incompatible with kernel {k}, stride {s}, pad {p}"))
    })
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &x in row {
        m = m.maxv(x);
    }
    let mut z = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    let inv = T::ONE / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let mut m = row[0];
    for &x in row {
        m = m.maxv(x);
    }
    let mut z = T::ZERO;
    for &x in row {
        z += (x - m).exp();
    }
    m + z.ln()
}

fn permute_to_sites<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::ZERO; n * plane * c];
    for ni in 0..n {
        let xn = &x[ni * c * plane..][..c * plane];
        let base = ni * plane;
        for ci in 0..c {
            let xc = &xn[ci * plane..][..plane];
            for p in 0..plane {
                out[(base + p) * c + ci] = xc[p];
            }
        }
    }
    out
}

fn permute_from_sites<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::ZERO; n * c * plane];
    for ni in 0..n {
        let on = &mut out[ni * c * plane..][..c * plane];
        let base = ni * plane;
        for ci in 0..c {
            let oc = &mut on[ci * plane..][..plane];
            for p in 0..plane {
                oc[p] = x[(base + p) * c + ci];
            }
        }
    }
    out
}

// tanh form of GELU; smooth, so finite differences see the same function.
fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}
