use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Precision, Var};
use crate::real::{matmul, matmul_at, matmul_bt, Real};
use crate::tensor::{pixel_shuffle, pixel_unshuffle, resize_bilinear, resize_bilinear_adjoint, Tensor};

/// Round to the nearest bfloat16 value (ties to even).
pub(crate) fn round_bf16<T: Real>(v: T) -> T {
    let f = v.to_f32().unwrap();
    if !f.is_finite() {
        return v;
    }
    let bits = f.to_bits();
    let rounded = (bits + 0x7fff + ((bits >> 16) & 1)) & 0xffff_0000;
    T::lit(f32::from_bits(rounded) as f64)
}

struct LinearOp {
    rows: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Op<T> for LinearOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (rows, k, n) = (self.rows, self.k, self.n);
        let mut out = vec![None, None];
        if wants[0] {
            let mut dx = Tensor::zeros(x[0].shape());
            matmul_bt(g.data(), x[1].data(), dx.data_mut(), rows, n, k, false);
            out[0] = Some(dx);
        }
        if wants[1] {
            let mut dw = Tensor::zeros(x[1].shape());
            matmul_at(x[0].data(), g.data(), dw.data_mut(), k, rows, n, false);
            out[1] = Some(dw);
        }
        if x.len() > 2 && wants[2] {
            let mut db = vec![T::zero(); n];
            for row in g.data().chunks_exact(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out.push(Some(Tensor::from_vec(&[n], db)?));
        }
        Ok(out)
    }
}

struct ConcatOp {
    widths: Vec<usize>,
}

impl<T: Real> Op<T> for ConcatOp {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let total: usize = self.widths.iter().sum();
        let rows = out.rows();
        let mut offset = 0;
        let mut res = Vec::with_capacity(self.widths.len());
        for (&w, &want) in self.widths.iter().zip(wants) {
            if want {
                let mut shape = out.shape().to_vec();
                *shape.last_mut().unwrap() = w;
                let mut data = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                }
                res.push(Some(Tensor::from_vec(&shape, data)?));
            } else {
                res.push(None);
            }
            offset += w;
        }
        Ok(res)
    }
}

struct NarrowOp {
    start: usize,
    width: usize,
}

impl<T: Real> Op<T> for NarrowOp {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let total = x[0].last_dim();
        let mut dx = Tensor::zeros(x[0].shape());
        for (drow, grow) in dx.data_mut().chunks_exact_mut(total).zip(g.data().chunks_exact(self.width)) {
            drow[self.start..self.start + self.width].copy_from_slice(grow);
        }
        Ok(vec![Some(dx)])
    }
}

struct ShuffleOp {
    factor: usize,
    unshuffle: bool,
}

impl<T: Real> Op<T> for ShuffleOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let dx = if self.unshuffle { pixel_shuffle(g, self.factor)? } else { pixel_unshuffle(g, self.factor)? };
        Ok(vec![Some(dx)])
    }
}

struct ResizeOp {
    h: usize,
    w: usize,
}

impl<T: Real> Op<T> for ResizeOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(resize_bilinear_adjoint(g, self.h, self.w)?)])
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Affine map over the last axis: `x[.., k] @ w[k, n] + b[n]`.
    ///
    /// On channels-last maps this is a 1x1 convolution.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let k = xs.last_dim();
        let &[wk, n] = ws.shape() else {
            return Err(TensorError::shape("linear", "rank-2 weight", format!("{:?}", ws.shape())));
        };
        if wk != k {
            return Err(TensorError::shape("linear", format!("input width {wk}"), format!("{k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(TensorError::shape("linear", format!("bias [{n}]"), format!("{:?}", self.shape(b))));
            }
        }
        let rows = xs.rows();
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.data_mut().chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        match self.precision() {
            Precision::High => matmul(xs.data(), ws.data(), out.data_mut(), rows, k, n, b.is_some()),
            Precision::Mixed => {
                let xr: Vec<T> = xs.data().iter().map(|&v| round_bf16(v)).collect();
                let wr: Vec<T> = ws.data().iter().map(|&v| round_bf16(v)).collect();
                matmul(&xr, &wr, out.data_mut(), rows, k, n, b.is_some());
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.push(out, &inputs, LinearOp { rows, k, n }))
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for v in vars {
            let s = self.shape(*v);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::shape("concat", format!("{lead:?} x C"), format!("{s:?}")));
            }
        }
        let widths: Vec<usize> = vars.iter().map(|v| self.value(*v).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vars.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, vars, ConcatOp { widths }))
    }

    /// Channels `start..start + width` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.value(x);
        let total = xs.last_dim();
        if start + width > total {
            return Err(TensorError::shape("narrow", format!("range within {total}"), format!("{start}..{}", start + width)));
        }
        let mut data = Vec::with_capacity(xs.rows() * width);
        for row in xs.data().chunks_exact(total) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, &[x], NarrowOp { start, width }))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = pixel_unshuffle(self.value(x), factor)?;
        Ok(self.push(out, &[x], ShuffleOp { factor, unshuffle: true }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), factor)?;
        Ok(self.push(out, &[x], ShuffleOp { factor, unshuffle: false }))
    }

    /// Bilinear resize of a channels-last map (half-pixel centres).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (_, h, w, _) = self.value(x).dims4()?;
        if h == oh && w == ow {
            return Ok(x);
        }
        let out = resize_bilinear(self.value(x), oh, ow)?;
        Ok(self.push(out, &[x], ResizeOp { h, w }))
    }
}
