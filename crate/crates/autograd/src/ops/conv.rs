use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::{matmul, matmul_at, matmul_bt, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

impl Geom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Source coordinate for output `o` and tap `t`, if inside the image.
    #[inline]
    fn src(o: usize, t: usize, pad: usize, size: usize) -> Option<usize> {
        let s = (o + t).checked_sub(pad)?;
        (s < size).then_some(s)
    }
}

struct DepthwiseOp {
    g: Geom,
}

impl<T: Real> Op<T> for DepthwiseOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let Geom { n, h, w, c, k } = self.g;
        let pad = self.g.pad();
        let (xs, ws, gs) = (x[0].data(), x[1].data(), grad.data());
        let mut dx = wants[0].then(|| vec![T::zero(); xs.len()]);
        let mut dw = vec![T::zero(); ws.len()];
        for b in 0..n {
            for oy in 0..h {
                for ox in 0..w {
                    let go = ((b * h + oy) * w + ox) * c;
                    let grow = &gs[go..go + c];
                    for ky in 0..k {
                        let Some(iy) = Geom::src(oy, ky, pad, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = Geom::src(ox, kx, pad, w) else { continue };
                            let xi = ((b * h + iy) * w + ix) * c;
                            let wi = (ky * k + kx) * c;
                            let xrow = &xs[xi..xi + c];
                            let dwrow = &mut dw[wi..wi + c];
                            for ch in 0..c {
                                dwrow[ch] += grow[ch] * xrow[ch];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wrow = &ws[wi..wi + c];
                                let dxrow = &mut dx[xi..xi + c];
                                for ch in 0..c {
                                    dxrow[ch] += grow[ch] * wrow[ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![dx.map(|d| Tensor::from_vec(x[0].shape(), d)).transpose()?, Some(Tensor::from_vec(x[1].shape(), dw)?)];
        if x.len() > 2 {
            let mut db = vec![T::zero(); c];
            for row in gs.chunks_exact(c) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out.push(Some(Tensor::from_vec(&[c], db)?));
        }
        Ok(out)
    }
}

fn im2col<T: Real>(x: &[T], g: Geom, b: usize, cols: &mut [T]) {
    let Geom { h, w, c, k, .. } = g;
    let pad = g.pad();
    let kc = k * k * c;
    for oy in 0..h {
        for ox in 0..w {
            let row = &mut cols[(oy * w + ox) * kc..(oy * w + ox + 1) * kc];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    match (Geom::src(oy, ky, pad, h), Geom::src(ox, kx, pad, w)) {
                        (Some(iy), Some(ix)) => {
                            let s = ((b * h + iy) * w + ix) * c;
                            dst.copy_from_slice(&x[s..s + c]);
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: Geom, b: usize, dx: &mut [T]) {
    let Geom { h, w, c, k, .. } = g;
    let pad = g.pad();
    let kc = k * k * c;
    for oy in 0..h {
        for ox in 0..w {
            let row = &cols[(oy * w + ox) * kc..(oy * w + ox + 1) * kc];
            for ky in 0..k {
                let Some(iy) = Geom::src(oy, ky, pad, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = Geom::src(ox, kx, pad, w) else { continue };
                    let s = ((b * h + iy) * w + ix) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, &v) in dx[s..s + c].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    g: Geom,
    cout: usize,
}

impl<T: Real> Op<T> for Conv2dOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = self.g;
        let (hw, kc, cout) = (g.h * g.w, g.k * g.k * g.c, self.cout);
        let (xs, ws, gs) = (x[0].data(), x[1].data(), grad.data());
        let mut cols = vec![T::zero(); hw * kc];
        let mut dx = wants[0].then(|| vec![T::zero(); xs.len()]);
        let mut dw = vec![T::zero(); ws.len()];
        for b in 0..g.n {
            let gb = &gs[b * hw * cout..(b + 1) * hw * cout];
            if wants[1] {
                im2col(xs, g, b, &mut cols);
                matmul_at(&cols, gb, &mut dw, kc, hw, cout, true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul_bt(gb, ws, &mut cols, hw, cout, kc, false);
                col2im_add(&cols, g, b, dx);
            }
        }
        let mut out = vec![dx.map(|d| Tensor::from_vec(x[0].shape(), d)).transpose()?, Some(Tensor::from_vec(x[1].shape(), dw)?)];
        if x.len() > 2 {
            let mut db = vec![T::zero(); cout];
            for row in gs.chunks_exact(cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out.push(Some(Tensor::from_vec(&[cout], db)?));
        }
        Ok(out)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Depthwise `k x k` convolution with zero same-padding.
    ///
    /// `w` has shape `[k, k, c]`, `b` shape `[c]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, h, wd, c) = self.value(x).dims4()?;
        let &[k, k2, wc] = self.shape(w) else {
            return Err(TensorError::shape("depthwise_conv", "[k, k, c] kernel", format!("{:?}", self.shape(w))));
        };
        if k != k2 || k % 2 == 0 || wc != c {
            return Err(TensorError::shape("depthwise_conv", format!("odd square kernel over {c} channels"), format!("{:?}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(TensorError::shape("depthwise_conv", format!("bias [{c}]"), format!("{:?}", self.shape(b))));
            }
        }
        let g = Geom { n, h, w: wd, c, k };
        let pad = g.pad();
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..n {
            for oy in 0..h {
                for ox in 0..wd {
                    let o = ((bi * h + oy) * wd + ox) * c;
                    let orow = &mut out[o..o + c];
                    if let Some(bias) = bias {
                        orow.copy_from_slice(bias);
                    }
                    for ky in 0..k {
                        let Some(iy) = Geom::src(oy, ky, pad, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = Geom::src(ox, kx, pad, wd) else { continue };
                            let xi = ((bi * h + iy) * wd + ix) * c;
                            let wi = (ky * k + kx) * c;
                            let xrow = &xs[xi..xi + c];
                            let wrow = &ws[wi..wi + c];
                            for ch in 0..c {
                                orow[ch] += xrow[ch] * wrow[ch];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, h, wd, c], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(out, &inputs, DepthwiseOp { g }))
    }

    /// Dense `k x k` convolution, stride 1, zero same-padding.
    ///
    /// `w` has shape `[k, k, c_in, c_out]`, `b` shape `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, h, wd, c) = self.value(x).dims4()?;
        let &[k, k2, cin, cout] = self.shape(w) else {
            return Err(TensorError::shape("conv2d", "[k, k, cin, cout] kernel", format!("{:?}", self.shape(w))));
        };
        if k != k2 || k % 2 == 0 || cin != c {
            return Err(TensorError::shape("conv2d", format!("odd square kernel over {c} channels"), format!("{:?}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::shape("conv2d", format!("bias [{cout}]"), format!("{:?}", self.shape(b))));
            }
        }
        let g = Geom { n, h, w: wd, c, k };
        let (hw, kc) = (h * wd, k * k * c);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); n * hw * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        let mut cols = vec![T::zero(); hw * kc];
        for bi in 0..n {
            im2col(xs, g, bi, &mut cols);
            matmul(&cols, ws, &mut out[bi * hw * cout..(bi + 1) * hw * cout], hw, kc, cout, true);
        }
        let out = Tensor::from_vec(&[n, h, wd, cout], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(out, &inputs, Conv2dOp { g, cout }))
    }
}
