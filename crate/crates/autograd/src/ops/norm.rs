use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

use super::same_shape;

struct LayerNormOp<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> Op<T> for LayerNormOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = x[0].last_dim();
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let mut dx = Tensor::zeros(x[0].shape());
        for (r, ((drow, xrow), grow)) in dx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(x[0].data().chunks_exact(c))
            .zip(g.data().chunks_exact(c))
            .enumerate()
        {
            let (mu, rs) = (self.mean[r], self.rstd[r]);
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for (&gv, &xv) in grow.iter().zip(xrow) {
                sg += gv;
                sgx += gv * (xv - mu) * rs;
            }
            let (mg, mgx) = (sg * inv_c, sgx * inv_c);
            for ((d, &gv), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                *d = rs * (gv - mg - (xv - mu) * rs * mgx);
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// `[n, .., c]` map against a per-sample `[n, c]` vector.
fn per_sample_dims(op: &'static str, x: &[usize], v: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, c) = (x[0], *x.last().unwrap());
    if x.len() < 2 || v != [n, c] {
        return Err(TensorError::shape(op, format!("[{n}, {c}]"), format!("{v:?}")));
    }
    let spatial = x[1..x.len() - 1].iter().product();
    Ok((n, spatial, c))
}

struct ModulateOp {
    n: usize,
    hw: usize,
    c: usize,
}

impl<T: Real> Op<T> for ModulateOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, hw, c) = (self.n, self.hw, self.c);
        let (xs, gamma, gs) = (x[0].data(), x[1].data(), g.data());
        let mut dx = wants[0].then(|| Tensor::zeros(x[0].shape()));
        let mut dgamma = vec![T::zero(); n * c];
        let mut dbeta = vec![T::zero(); n * c];
        for b in 0..n {
            let gm = &gamma[b * c..(b + 1) * c];
            for p in 0..hw {
                let o = (b * hw + p) * c;
                for ch in 0..c {
                    let gv = gs[o + ch];
                    dgamma[b * c + ch] += gv * xs[o + ch];
                    dbeta[b * c + ch] += gv;
                }
                if let Some(dx) = dx.as_mut() {
                    for ch in 0..c {
                        dx.data_mut()[o + ch] = gs[o + ch] * gm[ch];
                    }
                }
            }
        }
        Ok(vec![dx, Some(Tensor::from_vec(&[n, c], dgamma)?), Some(Tensor::from_vec(&[n, c], dbeta)?)])
    }
}

struct GatedResidualOp {
    n: usize,
    hw: usize,
    c: usize,
}

impl<T: Real> Op<T> for GatedResidualOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, hw, c) = (self.n, self.hw, self.c);
        let (hs, gate, gs) = (x[1].data(), x[2].data(), g.data());
        let mut dh = wants[1].then(|| Tensor::zeros(x[1].shape()));
        let mut dgate = vec![T::zero(); n * c];
        for b in 0..n {
            let gt = &gate[b * c..(b + 1) * c];
            for p in 0..hw {
                let o = (b * hw + p) * c;
                for ch in 0..c {
                    dgate[b * c + ch] += gs[o + ch] * hs[o + ch];
                }
                if let Some(dh) = dh.as_mut() {
                    for ch in 0..c {
                        dh.data_mut()[o + ch] = gs[o + ch] * gt[ch];
                    }
                }
            }
        }
        Ok(vec![wants[0].then(|| g.clone()), dh, Some(Tensor::from_vec(&[n, c], dgate)?)])
    }
}

struct GrnOp<T> {
    n: usize,
    hw: usize,
    c: usize,
    eps: T,
}

impl<T: Real> GrnOp<T> {
    /// Per-sample channel norms `G` and normalisers `G / (mean(G) + eps)`.
    fn stats(&self, xs: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (n, hw, c) = (self.n, self.hw, self.c);
        let mut gnorm = vec![T::zero(); n * c];
        for (sample, acc) in xs.chunks_exact(hw * c).zip(gnorm.chunks_exact_mut(c)) {
            for row in sample.chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v * v;
                }
            }
        }
        for v in &mut gnorm {
            *v = v.sqrt();
        }
        let mut denom = vec![T::zero(); n];
        let mut nx = vec![T::zero(); n * c];
        for b in 0..n {
            let m = gnorm[b * c..(b + 1) * c].iter().copied().sum::<T>() / T::from_usize(c).unwrap();
            denom[b] = m + self.eps;
            for ch in 0..c {
                nx[b * c + ch] = gnorm[b * c + ch] / denom[b];
            }
        }
        (gnorm, denom, nx)
    }
}

impl<T: Real> Op<T> for GrnOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, hw, c) = (self.n, self.hw, self.c);
        let (xs, gamma, gs) = (x[0].data(), x[1].data(), g.data());
        let (gnorm, denom, nx) = self.stats(xs);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dnx = vec![T::zero(); n * c];
        for b in 0..n {
            let nxb = &nx[b * c..(b + 1) * c];
            let dnxb = &mut dnx[b * c..(b + 1) * c];
            let range = b * hw * c..(b + 1) * hw * c;
            for (xr, gr) in xs[range.clone()].chunks_exact(c).zip(gs[range].chunks_exact(c)) {
                for ch in 0..c {
                    let gx = gr[ch] * xr[ch];
                    dgamma[ch] += gx * nxb[ch];
                    dbeta[ch] += gr[ch];
                    dnxb[ch] += gx * gamma[ch];
                }
            }
        }
        let mut dx = None;
        if wants[0] {
            let mut d = vec![T::zero(); xs.len()];
            let cf = T::from_usize(c).unwrap();
            for b in 0..n {
                let dd = denom[b];
                let cross: T = (0..c).map(|ch| dnx[b * c + ch] * gnorm[b * c + ch]).sum::<T>() / (dd * dd * cf);
                // dL/dG_c / G_c, zero where the channel is identically zero
                let coef: Vec<T> = (0..c)
                    .map(|ch| {
                        let gn = gnorm[b * c + ch];
                        if gn > T::zero() {
                            (dnx[b * c + ch] / dd - cross) / gn
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let scale: Vec<T> = (0..c).map(|ch| T::one() + gamma[ch] * nx[b * c + ch]).collect();
                let range = b * hw * c..(b + 1) * hw * c;
                for ((dr, xr), gr) in d[range.clone()].chunks_exact_mut(c).zip(xs[range.clone()].chunks_exact(c)).zip(gs[range].chunks_exact(c)) {
                    for ch in 0..c {
                        dr[ch] = gr[ch] * scale[ch] + coef[ch] * xr[ch];
                    }
                }
            }
            dx = Some(Tensor::from_vec(x[0].shape(), d)?);
        }
        Ok(vec![dx, Some(Tensor::from_vec(&[c], dgamma)?), Some(Tensor::from_vec(&[c], dbeta)?)])
    }
}

/// Per-channel statistics of a batch-normalised activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as tracked by running estimates.
    pub var: Vec<T>,
}

struct BatchNormOp<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> Op<T> for BatchNormOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = x[0].last_dim();
        let rows = x[0].rows();
        let (xs, gamma, gs) = (x[0].data(), x[1].data(), g.data());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (xrow, grow) in xs.chunks_exact(c).zip(gs.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += grow[ch] * (xrow[ch] - self.mean[ch]) * self.rstd[ch];
                dbeta[ch] += grow[ch];
            }
        }
        let mut dx = None;
        if wants[0] {
            let m = T::from_usize(rows).unwrap();
            let mut d = vec![T::zero(); xs.len()];
            for ((drow, xrow), grow) in d.chunks_exact_mut(c).zip(xs.chunks_exact(c)).zip(gs.chunks_exact(c)) {
                for ch in 0..c {
                    let scale = gamma[ch] * self.rstd[ch];
                    drow[ch] = if self.batch_stats {
                        let xhat = (xrow[ch] - self.mean[ch]) * self.rstd[ch];
                        scale * (grow[ch] - dbeta[ch] / m - xhat * dgamma[ch] / m)
                    } else {
                        scale * grow[ch]
                    };
                }
            }
            dx = Some(Tensor::from_vec(x[0].shape(), d)?);
        }
        Ok(vec![dx, Some(Tensor::from_vec(&[c], dgamma)?), Some(Tensor::from_vec(&[c], dbeta)?)])
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Normalise each position over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let rows = xs.rows();
        let eps = T::lit(eps);
        let cf = T::from_usize(c).unwrap();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(xs.shape());
        for (orow, xrow) in out.data_mut().chunks_exact_mut(c).zip(xs.data().chunks_exact(c)) {
            let mu = xrow.iter().copied().sum::<T>() / cf;
            let var = xrow.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = (v - mu) * rs;
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(out, &[x], LayerNormOp { mean, rstd })
    }

    /// `x * gamma + beta` with per-sample, per-channel `gamma`, `beta` of shape `[n, c]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, hw, c) = per_sample_dims("modulate", self.shape(x), self.shape(gamma))?;
        same_shape("modulate", self.shape(gamma), self.shape(beta))?;
        let mut out = self.value(x).clone();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        for b in 0..n {
            for p in 0..hw {
                let o = (b * hw + p) * c;
                for ch in 0..c {
                    let v = &mut out.data_mut()[o + ch];
                    *v = *v * gm[b * c + ch] + bt[b * c + ch];
                }
            }
        }
        Ok(self.push(out, &[x, gamma, beta], ModulateOp { n, hw, c }))
    }

    /// `x + gate * h` with a per-sample, per-channel `gate` of shape `[n, c]`.
    pub fn gated_residual(&mut self, x: Var, h: Var, gate: Var) -> Result<Var> {
        same_shape("gated_residual", self.shape(x), self.shape(h))?;
        let (n, hw, c) = per_sample_dims("gated_residual", self.shape(h), self.shape(gate))?;
        let mut out = self.value(x).clone();
        let (hs, gt) = (self.value(h).data(), self.value(gate).data());
        for b in 0..n {
            for p in 0..hw {
                let o = (b * hw + p) * c;
                for ch in 0..c {
                    out.data_mut()[o + ch] += gt[b * c + ch] * hs[o + ch];
                }
            }
        }
        Ok(self.push(out, &[x, h, gate], GatedResidualOp { n, hw, c }))
    }

    /// Global response normalisation over the spatial axes of a `[n, h, w, c]` map:
    /// `gamma * (x * N(x)) + beta + x` with `N(x) = ||x_c|| / (mean_c ||x_c|| + eps)`.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("grn", format!("[{c}] affine"), format!("{:?}", self.shape(gamma))));
        }
        let op = GrnOp { n, hw: h * w, c, eps: T::lit(eps) };
        let (_, _, nx) = op.stats(self.value(x).data());
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (b, sample) in out.data_mut().chunks_exact_mut(h * w * c).enumerate() {
            let nxb = &nx[b * c..(b + 1) * c];
            for row in sample.chunks_exact_mut(c) {
                for ch in 0..c {
                    let v = row[ch];
                    row[ch] = gm[ch] * (v * nxb[ch]) + bt[ch] + v;
                }
            }
        }
        Ok(self.push(out, &[x, gamma, beta], op))
    }

    /// Batch normalisation over every axis but the last.
    ///
    /// With `running = None` the batch statistics are used and returned; with
    /// `Some(stats)` the given statistics normalise the input (inference).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BatchStats<T>>,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xs = self.value(x);
        let c = xs.last_dim();
        let rows = xs.rows();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("batch_norm", format!("[{c}] affine"), format!("{:?}", self.shape(gamma))));
        }
        let eps = T::lit(eps);
        let (mean, var_biased, stats) = match running {
            Some(s) => (s.mean.clone(), s.var.clone(), s.clone()),
            None => {
                let m = T::from_usize(rows.max(1)).unwrap();
                let mut mean = vec![T::zero(); c];
                for row in xs.data().chunks_exact(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![T::zero(); c];
                for row in xs.data().chunks_exact(c) {
                    for ch in 0..c {
                        let d = row[ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                let unbiased = if rows > 1 { T::from_usize(rows - 1).unwrap() } else { T::one() };
                let var_unbiased = var.iter().map(|&v| v / unbiased).collect();
                var.iter_mut().for_each(|v| *v /= m);
                (mean.clone(), var, BatchStats { mean, var: var_unbiased })
            }
        };
        let rstd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xs.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = gm[ch] * (row[ch] - mean[ch]) * rstd[ch] + bt[ch];
            }
        }
        let op = BatchNormOp { mean, rstd, batch_stats: running.is_none() };
        Ok((self.push(out, &[x, gamma, beta], op), stats))
    }
}
