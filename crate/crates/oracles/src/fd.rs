use hqvae_tensor::{Grads, ParamId, ParamStore, Tensor};

/// Central-difference gradient of `f` w.r.t. one parameter tensor.
/// `f` must be a pure function of the store (same RNG draws on every call).
pub fn fd_grad<F>(store: &mut ParamStore<f64>, id: ParamId, h: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let n = store.get(id).elems();
    let dims = store.get(id).dims().to_vec();
    let mut out = Tensor::<f64>::zeros(&dims);
    for i in 0..n {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let fp = f(store);
        store.get_mut(id).data_mut()[i] = orig - h;
        let fm = f(store);
        store.get_mut(id).data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst per-coordinate relative error, denominator max(|fd|, |an|, 1).
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    /// Vector-level ||fd - an|| / max(||fd||, eps) over all checked params.
    pub vector_rel: f64,
    pub coords: usize,
}

impl FdReport {
    pub fn max_rel(&self) -> f64 {
        self.worst_rel.max(self.vector_rel)
    }
}

/// Compare analytic gradients against central differences for the given
/// parameters. Parameters absent from `analytic` are treated as zero.
pub fn check_grads_against<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    analytic: &Grads<f64>,
    h: f64,
    mut f: F,
) -> FdReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let mut worst_rel = 0.0f64;
    let mut worst_param = String::new();
    let mut worst_coord = 0usize;
    let mut num2 = 0.0f64;
    let mut den2 = 0.0f64;
    let mut coords = 0usize;
    for &id in ids {
        let fd = fd_grad(store, id, h, &mut f);
        let name = store.name(id).to_string();
        let zero;
        let an = match analytic.get(id) {
            Some(t) => t,
            None => {
                zero = Tensor::<f64>::zeros(&fd.dims().to_vec());
                &zero
            }
        };
        for (i, (&a, &b)) in fd.data().iter().zip(an.data().iter()).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            if rel > worst_rel {
                worst_rel = rel;
                worst_param = name.clone();
                worst_coord = i;
            }
            num2 += (a - b) * (a - b);
            den2 += a * a;
            coords += 1;
        }
    }
    FdReport {
        worst_rel,
        worst_param,
        worst_coord,
        vector_rel: num2.sqrt() / den2.sqrt().max(1e-12),
        coords,
    }
}
