//! Batched forward, reverse and forward-over-reverse passes.
//!
//! Rows of every matrix are samples. A [`Tape`] keeps the activations of a
//! forward pass; [`Tape::backward`] accumulates parameter gradients summed
//! over the batch. A [`Tangent`] pushes per-sample input directions `v_k`
//! through the recorded pass, which gives `D_x u(x_k) · v_k`, and
//! [`Tape::backward_dual`] differentiates any loss of `(u, D_x u · v)` with
//! respect to the parameters. The DBDP2 loss needs exactly that.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::NetworkParams;
use crate::error::{Error, Result};

/// Recorded forward pass over a batch.
pub struct Tape<'a> {
    params: &'a NetworkParams,
    /// `acts[0]` is the (rescaled) input, `acts[l + 1]` the output of hidden layer `l`.
    acts: Vec<Array2<f64>>,
    /// GroupSort source positions per hidden layer (row-major, `K × width`).
    perms: Vec<Option<Vec<u32>>>,
    core: Array2<f64>,
    out: Array2<f64>,
    scale: f64,
}

/// Directional derivatives along per-sample input directions.
pub struct Tangent {
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    core: Array2<f64>,
    out: Array2<f64>,
}

impl Tangent {
    /// `D_x u(x_k) · v_k` for every sample, `K × output_dim`.
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

fn affine(a: &Array2<f64>, params: &NetworkParams, l: usize) -> Array2<f64> {
    let mut z = a.dot(&params.weight(l).t());
    z += &params.bias(l);
    z
}

fn groupsort_rows(z: &mut Array2<f64>, group: usize) -> Vec<u32> {
    let width = z.ncols();
    let mut perm = Vec::with_capacity(z.len());
    let mut idx: Vec<u32> = Vec::with_capacity(group);
    let mut buf = vec![0.0; width];
    for mut row in z.rows_mut() {
        let base = perm.len();
        for start in (0..width).step_by(group) {
            idx.clear();
            idx.extend(start as u32..(start + group) as u32);
            // stable: ties keep their original order
            idx.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]));
            perm.extend_from_slice(&idx);
        }
        for (p, &src) in perm[base..].iter().enumerate() {
            buf[p] = row[src as usize];
        }
        for (r, b) in row.iter_mut().zip(&buf) {
            *r = *b;
        }
    }
    perm
}

fn gather(z: &Array2<f64>, perm: &[u32]) -> Array2<f64> {
    let width = z.ncols();
    let mut out = Array2::<f64>::zeros(z.raw_dim());
    for (k, (mut o, zr)) in out.rows_mut().into_iter().zip(z.rows()).enumerate() {
        let p = &perm[k * width..(k + 1) * width];
        for (dst, &src) in o.iter_mut().zip(p) {
            *dst = zr[src as usize];
        }
    }
    out
}

fn scatter(g: &Array2<f64>, perm: &[u32]) -> Array2<f64> {
    let width = g.ncols();
    let mut out = Array2::<f64>::zeros(g.raw_dim());
    for (k, (mut o, gr)) in out.rows_mut().into_iter().zip(g.rows()).enumerate() {
        let p = &perm[k * width..(k + 1) * width];
        for (&src, v) in p.iter().zip(gr.iter()) {
            o[src as usize] = *v;
        }
    }
    out
}

impl<'a> Tape<'a> {
    pub fn record(params: &'a NetworkParams, x: ArrayView2<'_, f64>) -> Result<Self> {
        let arch = params.arch();
        if x.ncols() != arch.input_dim {
            return Err(Error::DimensionMismatch {
                context: "layer 0 input".into(),
                expected: arch.input_dim,
                got: x.ncols(),
            });
        }
        let group = match arch.activation {
            super::Activation::GroupSort { group } => Some(group),
            super::Activation::Tanh => None,
        };
        let scale = params.log_scale().exp();
        let input = match group {
            Some(_) => {
                let mut a = x.to_owned();
                a += &ndarray::ArrayView1::from(params.shift());
                a /= scale;
                a
            }
            None => x.as_standard_layout().into_owned(),
        };
        let n_hidden = arch.hidden.len();
        let mut acts = Vec::with_capacity(n_hidden + 1);
        let mut perms = Vec::with_capacity(n_hidden);
        acts.push(input);
        for l in 0..n_hidden {
            let mut z = affine(&acts[l], params, l);
            match group {
                Some(g) => perms.push(Some(groupsort_rows(&mut z, g))),
                None => {
                    z.mapv_inplace(super::tanh);
                    perms.push(None);
                }
            }
            acts.push(z);
        }
        let core = affine(&acts[n_hidden], params, n_hidden);
        let out = if group.is_some() { &core * scale } else { core.clone() };
        Ok(Self {
            params,
            acts,
            perms,
            core,
            out,
            scale,
        })
    }

    /// Network outputs, `K × output_dim`.
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }

    pub fn into_output(self) -> Array2<f64> {
        self.out
    }

    /// Parameter gradient of `Σ_k gy_k · y_k`, plus the input gradient when
    /// requested.
    pub fn backward(&self, gy: ArrayView2<'_, f64>, want_input: bool) -> (NetworkParams, Option<Array2<f64>>) {
        let (g, gx) = self.reverse(gy, None, true, want_input);
        (g.expect("parameter gradient requested"), gx)
    }

    /// Input gradient of `Σ_k gy_k · y_k`, row `k` holding `∂/∂x_k`.
    pub fn input_vjp(&self, gy: ArrayView2<'_, f64>) -> Array2<f64> {
        self.reverse(gy, None, false, true).1.expect("input gradient requested")
    }

    /// Pushes per-sample directions `v` (`K × input_dim`) through the pass.
    pub fn tangent(&self, v: ArrayView2<'_, f64>) -> Tangent {
        let params = self.params;
        let n_hidden = params.arch().hidden.len();
        let mut a = v.to_owned();
        if params.arch().is_groupsort() {
            a /= self.scale;
        }
        let mut acts = Vec::with_capacity(n_hidden + 1);
        let mut pre = Vec::with_capacity(n_hidden);
        acts.push(a);
        for l in 0..n_hidden {
            let zd = acts[l].dot(&params.weight(l).t());
            let ad = match &self.perms[l] {
                Some(perm) => gather(&zd, perm),
                None => {
                    let mut ad = zd.clone();
                    Zip::from(&mut ad).and(&self.acts[l + 1]).for_each(|d, &t| *d *= 1.0 - t * t);
                    ad
                }
            };
            pre.push(zd);
            acts.push(ad);
        }
        let core = acts[n_hidden].dot(&params.weight(n_hidden).t());
        let out = if params.arch().is_groupsort() { &core * self.scale } else { core.clone() };
        Tangent { acts, pre, core, out }
    }

    /// Parameter gradient of `Σ_k (gy_k · y_k + gyd_k · ẏ_k)` where `ẏ` is
    /// the tangent output; second-order terms through the activation are
    /// included.
    pub fn backward_dual(&self, tangent: &Tangent, gy: ArrayView2<'_, f64>, gyd: ArrayView2<'_, f64>) -> NetworkParams {
        self.reverse(gy, Some((tangent, gyd)), true, false)
            .0
            .expect("parameter gradient requested")
    }

    fn reverse(
        &self,
        gy: ArrayView2<'_, f64>,
        dual: Option<(&Tangent, ArrayView2<'_, f64>)>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<NetworkParams>, Option<Array2<f64>>) {
        let params = self.params;
        let arch = params.arch();
        let gs = arch.is_groupsort();
        let beta = self.scale;
        let mut grads = want_params.then(|| NetworkParams::zeros(arch));
        let mut dbeta = 0.0;

        let mut g = gy.to_owned();
        let mut gt = dual.map(|(_, gyd)| gyd.to_owned());
        if gs {
            if want_params {
                dbeta += (&gy * &self.core).sum();
                if let Some((t, gyd)) = dual {
                    dbeta += (&gyd * &t.core).sum();
                }
            }
            g *= beta;
            if let Some(gt) = gt.as_mut() {
                *gt *= beta;
            }
        }

        let need_input = want_input || (gs && want_params);
        let n_layers = arch.n_layers();
        for l in (0..n_layers).rev() {
            if let Some(gr) = grads.as_mut() {
                let mut gw = g.t().dot(&self.acts[l]);
                if let (Some(gt), Some((t, _))) = (&gt, dual) {
                    gw += &gt.t().dot(&t.acts[l]);
                }
                gr.weight_mut(l).assign(&gw);
                gr.bias_mut(l).assign(&g.sum_axis(Axis(0)));
            }
            if l == 0 && !need_input {
                break;
            }
            let w = params.weight(l);
            let ga = g.dot(&w);
            let gad = gt.as_ref().map(|gt| gt.dot(&w));
            if l == 0 {
                g = ga;
                gt = gad;
                break;
            }
            match &self.perms[l - 1] {
                Some(perm) => {
                    g = scatter(&ga, perm);
                    gt = gad.map(|v| scatter(&v, perm));
                }
                None => {
                    let a = &self.acts[l];
                    match (gad, dual) {
                        (Some(gad), Some((t, _))) => {
                            let zd = &t.pre[l - 1];
                            let mut gz = ga;
                            let mut gzd = gad;
                            Zip::from(&mut gz)
                                .and(&mut gzd)
                                .and(a)
                                .and(zd)
                                .for_each(|gz, gzd, &t, &zd| {
                                    let s = 1.0 - t * t;
                                    *gz = *gz * s - 2.0 * t * s * zd * *gzd;
                                    *gzd *= s;
                                });
                            g = gz;
                            gt = Some(gzd);
                        }
                        _ => {
                            let mut gz = ga;
                            Zip::from(&mut gz).and(a).for_each(|gz, &t| *gz *= 1.0 - t * t);
                            g = gz;
                        }
                    }
                }
            }
        }

        let mut gx = None;
        if gs {
            if let Some(gr) = grads.as_mut() {
                let shift_grad = g.sum_axis(Axis(0)) / beta;
                gr.shift_mut().copy_from_slice(shift_grad.as_slice().expect("contiguous"));
                dbeta -= (&g * &self.acts[0]).sum() / beta;
                if let (Some(gt), Some((t, _))) = (&gt, dual) {
                    dbeta -= (gt * &t.acts[0]).sum() / beta;
                }
                gr.set_log_scale(beta * dbeta);
            }
            if want_input {
                gx = Some(g / beta);
            }
        } else if want_input {
            gx = Some(g);
        }
        (grads, gx)
    }
}

/// Evaluates the network on every row of `x`.
pub fn forward_batch(params: &NetworkParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(Tape::record(params, x)?.into_output())
}

/// Values and input gradients of a scalar-output network on every row of `x`.
pub fn value_and_input_grad(params: &NetworkParams, x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if params.arch().output_dim != 1 {
        return Err(Error::DimensionMismatch {
            context: "scalar network output".into(),
            expected: 1,
            got: params.arch().output_dim,
        });
    }
    let tape = Tape::record(params, x)?;
    let ones = Array2::<f64>::ones((x.nrows(), 1));
    let grad = tape.input_vjp(ones.view());
    let values = tape.out.column(0).to_owned();
    Ok((values, grad))
}
