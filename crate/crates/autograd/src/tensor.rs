use std::fmt;

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Dense row-major tensor. Spatial maps are laid out channels-last
/// (`[n, h, w, c]`), vectors as `[n, d]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape("from_vec", format!("{n} elements"), format!("{}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last (channel) axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    /// `(n, h, w, c)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(TensorError::shape("dims4", "rank 4", format!("{:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape("reshape", format!("{:?}", self.shape), format!("{shape:?}")));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::lit(v.f64())).collect() }
    }

    /// Select sample `i` of a batch (first axis), keeping a unit batch axis.
    pub fn sample(&self, i: usize) -> Tensor<T> {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[i * per..(i + 1) * per].to_vec() }
    }

    /// Stack equally shaped tensors with a leading unit axis into a batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| TensorError::invalid("stack", "no tensors"))?;
        let mut shape = first.shape.clone();
        if shape.is_empty() || shape[0] != 1 {
            return Err(TensorError::shape("stack", "leading unit axis", format!("{shape:?}")));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::shape("stack", format!("{:?}", first.shape), format!("{:?}", t.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        shape[0] = items.len();
        Ok(Tensor { shape, data })
    }
}

/// Pixel-unshuffle (space-to-depth) with factor `r` on a channels-last map.
///
/// Output channel index is `(dy * r + dx) * c + ch`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(TensorError::shape("pixel_unshuffle", format!("sides divisible by {r}"), format!("{h}x{w}")));
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * oh + oy) * ow + ox) * oc;
                for dy in 0..r {
                    for dx in 0..r {
                        let s = ((b * h + oy * r + dy) * w + ox * r + dx) * c;
                        let d = dst + (dy * r + dx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, oc], out)
}

/// Pixel-shuffle (depth-to-space), the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(TensorError::shape("pixel_shuffle", format!("channels divisible by {}", r * r), format!("{c}")));
    }
    let (oh, ow, oc) = (h * r, w * r, c / (r * r));
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let s0 = ((b * h + y) * w + xx) * c;
                for dy in 0..r {
                    for dx in 0..r {
                        let s = s0 + (dy * r + dx) * oc;
                        let d = ((b * oh + y * r + dy) * ow + xx * r + dx) * oc;
                        out[d..d + oc].copy_from_slice(&src[s..s + oc]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, oc], out)
}

/// One axis of a half-pixel-centred bilinear resampling: for each output
/// coordinate, the two source indices and the weight of the second one.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of a channels-last map (`align_corners = false`).
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.dims4()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(TensorError::invalid("resize_bilinear", "empty spatial extent"));
    }
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); n * oh * ow * c];
    let src = x.data();
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let p00 = ((b * h + y0) * w + x0) * c;
                let p01 = ((b * h + y0) * w + x1) * c;
                let p10 = ((b * h + y1) * w + x0) * c;
                let p11 = ((b * h + y1) * w + x1) * c;
                let d = ((b * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    out[d + ch] = w00 * src[p00 + ch] + w01 * src[p01 + ch] + w10 * src[p10 + ch] + w11 * src[p11 + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out)
}

/// Adjoint of [`resize_bilinear`]: scatters an output-sized gradient back
/// onto the `h x w` source grid.
pub(crate) fn resize_bilinear_adjoint<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, oh, ow, c) = g.dims4()?;
    if oh == h && ow == w {
        return Ok(g.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); n * h * w * c];
    let src = g.data();
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let ws = [
                    ((T::one() - fy) * (T::one() - fx), y0, x0),
                    ((T::one() - fy) * fx, y0, x1),
                    (fy * (T::one() - fx), y1, x0),
                    (fy * fx, y1, x1),
                ];
                let s = ((b * oh + oy) * ow + ox) * c;
                for (wt, yy, xx) in ws {
                    let d = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[d + ch] += wt * src[s + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 6, 3], |i| i as f64);
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 12]);
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::<f32>::full(&[1, 5, 7, 2], 0.25);
        let y = resize_bilinear(&x, 16, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_adjoint_is_transpose() {
        // <R x, g> == <x, R^T g>
        let x = Tensor::<f64>::from_fn(&[1, 3, 5, 2], |i| ((i * 7919) % 13) as f64 - 6.0);
        let g = Tensor::<f64>::from_fn(&[1, 8, 4, 2], |i| ((i * 104729) % 11) as f64 - 5.0);
        let rx = resize_bilinear(&x, 8, 4).unwrap();
        let rtg = resize_bilinear_adjoint(&g, 3, 5).unwrap();
        let lhs: f64 = rx.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rtg.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
