use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::real::Real;
use crate::tensor::Tensor;

use super::same_shape;

struct L1Op<T> {
    target: Tensor<T>,
    weight: Option<Tensor<T>>,
    norm: T,
}

impl<T: Real> Op<T> for L1Op<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = g.item() / self.norm;
        let mut dx = Tensor::zeros(x[0].shape());
        for (i, (d, (&a, &b))) in dx.data_mut().iter_mut().zip(x[0].data().iter().zip(self.target.data())).enumerate() {
            let w = self.weight.as_ref().map_or(T::one(), |w| w.data()[i]);
            let s = if a > b {
                T::one()
            } else if a < b {
                -T::one()
            } else {
                T::zero()
            };
            *d = s * w * scale;
        }
        Ok(vec![Some(dx)])
    }
}

/// Sliding-window weighting used by [`Graph::ssim`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsimWindow {
    /// Uniform weights over a `size x size` window.
    Uniform { size: usize },
    /// Separable Gaussian of the given width.
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Uniform { size: 11 }
    }
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Uniform { size } | SsimWindow::Gaussian { size, .. } => size,
        }
    }

    /// Normalised one-dimensional taps.
    pub fn taps(&self) -> Vec<f64> {
        match *self {
            SsimWindow::Uniform { size } => vec![1.0 / size as f64; size],
            SsimWindow::Gaussian { size, sigma } => {
                let mid = (size as f64 - 1.0) / 2.0;
                let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - mid).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

/// Separable valid-region correlation of an `h x w` plane.
fn filter_valid<T: Real>(plane: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = T::zero();
            for (t, &wt) in taps.iter().enumerate() {
                acc += wt * plane[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &wt) in taps.iter().enumerate() {
            let src = &rows[(y + t) * ow..(y + t + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += wt * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_adjoint<T: Real>(map: &[T], h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..oh {
        for (t, &wt) in taps.iter().enumerate() {
            let dst = &mut rows[(y + t) * ow..(y + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(&map[y * ow..(y + 1) * ow]) {
                *d += wt * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (t, &wt) in taps.iter().enumerate() {
                out[y * w + x + t] += wt * v;
            }
        }
    }
    out
}

struct PlaneStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn plane_stats<T: Real>(x: &[T], y: &[T], h: usize, w: usize, taps: &[T]) -> PlaneStats<T> {
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&u, &v)| u * v).collect::<Vec<T>>();
    PlaneStats {
        mu_x: filter_valid(x, h, w, taps),
        mu_y: filter_valid(y, h, w, taps),
        exx: filter_valid(&sq(x, x), h, w, taps),
        eyy: filter_valid(&sq(y, y), h, w, taps),
        exy: filter_valid(&sq(x, y), h, w, taps),
    }
}

struct SsimParts<T> {
    num: T,
    den: T,
    a: T,
    b: T,
    c: T,
    d: T,
}

#[inline]
fn ssim_parts<T: Real>(mx: T, my: T, exx: T, eyy: T, exy: T, c1: T, c2: T) -> SsimParts<T> {
    let two = T::lit(2.0);
    let a = two * mx * my + c1;
    let b = two * (exy - mx * my) + c2;
    let c = mx * mx + my * my + c1;
    let d = (exx - mx * mx) + (eyy - my * my) + c2;
    SsimParts { num: a * b, den: c * d, a, b, c, d }
}

/// Split a `[n, h, w, ch]` tensor into contiguous `h x w` planes.
fn planes<T: Real>(t: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let (n, h, w, c) = t.dims4()?;
    let mut out = vec![vec![T::zero(); h * w]; n * c];
    for b in 0..n {
        for (p, px) in t.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[b * c + ch][p] = v;
            }
        }
    }
    Ok(out)
}

struct SsimOp<T> {
    target: Tensor<T>,
    taps: Vec<T>,
    c1: T,
    c2: T,
}

impl<T: Real> Op<T> for SsimOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, h, w, c) = x[0].dims4()?;
        let k = self.taps.len();
        let count = T::from_usize(n * c * (h - k + 1) * (w - k + 1)).unwrap();
        let scale = g.item() / count;
        let two = T::lit(2.0);
        let xp = planes(x[0])?;
        let yp = planes(&self.target)?;
        let mut dx = Tensor::zeros(x[0].shape());
        for (pi, (xs, ys)) in xp.iter().zip(&yp).enumerate() {
            let st = plane_stats(xs, ys, h, w, &self.taps);
            let m = st.mu_x.len();
            let (mut d_mu, mut d_exx, mut d_exy) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
            for i in 0..m {
                let (mx, my) = (st.mu_x[i], st.mu_y[i]);
                let p = ssim_parts(mx, my, st.exx[i], st.eyy[i], st.exy[i], self.c1, self.c2);
                let den2 = p.den * p.den;
                let dnum_mu = two * my * p.b - two * my * p.a;
                let dden_mu = two * mx * p.d - two * mx * p.c;
                d_mu[i] = scale * (dnum_mu * p.den - p.num * dden_mu) / den2;
                d_exx[i] = scale * (-p.num * p.c) / den2;
                d_exy[i] = scale * two * p.a / p.den;
            }
            let f_mu = filter_adjoint(&d_mu, h, w, &self.taps);
            let f_exx = filter_adjoint(&d_exx, h, w, &self.taps);
            let f_exy = filter_adjoint(&d_exy, h, w, &self.taps);
            let (b, ch) = (pi / c, pi % c);
            for p in 0..h * w {
                dx.data_mut()[(b * h * w + p) * c + ch] = f_mu[p] + two * xs[p] * f_exx[p] + ys[p] * f_exy[p];
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Mean structural similarity between two `[n, h, w, c]` images, using
/// stabilisers `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`.
pub fn ssim_value<T: Real>(x: &Tensor<T>, y: &Tensor<T>, window: SsimWindow, dynamic_range: f64) -> Result<T> {
    same_shape("ssim", x.shape(), y.shape())?;
    let (n, h, w, c) = x.dims4()?;
    let k = window.size();
    if h < k || w < k || k == 0 {
        return Err(TensorError::invalid("ssim", format!("image {h}x{w} smaller than {k}x{k} window")));
    }
    let taps: Vec<T> = window.taps().into_iter().map(T::lit).collect();
    let (c1, c2) = (T::lit((0.01 * dynamic_range).powi(2)), T::lit((0.03 * dynamic_range).powi(2)));
    let xp = planes(x)?;
    let yp = planes(y)?;
    let mut total = T::zero();
    for (xs, ys) in xp.iter().zip(&yp) {
        let st = plane_stats(xs, ys, h, w, &taps);
        for i in 0..st.mu_x.len() {
            let p = ssim_parts(st.mu_x[i], st.mu_y[i], st.exx[i], st.eyy[i], st.exy[i], c1, c2);
            total += p.num / p.den;
        }
    }
    Ok(total / T::from_usize(n * c * (h - k + 1) * (w - k + 1)).unwrap())
}

fn check_labels(op: &'static str, rows: usize, classes: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != rows {
        return Err(TensorError::shape(op, format!("{rows} labels"), format!("{}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(TensorError::invalid(op, format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<T> {
    let k = logits.last_dim();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

struct CrossEntropyOp<T> {
    labels: Vec<u32>,
    class_weights: Option<Vec<T>>,
    norm: T,
}

impl<T: Real> CrossEntropyOp<T> {
    fn weight(&self, label: u32) -> T {
        self.class_weights.as_ref().map_or(T::one(), |w| w[label as usize])
    }
}

impl<T: Real> Op<T> for CrossEntropyOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let k = x[0].last_dim();
        let scale = g.item() / self.norm;
        let mut p = softmax_rows(x[0]);
        for (row, &l) in p.chunks_exact_mut(k).zip(&self.labels) {
            row[l as usize] -= T::one();
            let w = scale * self.weight(l);
            for v in row.iter_mut() {
                *v *= w;
            }
        }
        Ok(vec![Some(Tensor::from_vec(x[0].shape(), p)?)])
    }
}

struct SoftDiceOp<T> {
    labels: Vec<u32>,
    smooth: T,
}

impl<T: Real> SoftDiceOp<T> {
    /// Per-class (intersection, prediction mass, label mass).
    fn sums(&self, p: &[T], k: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (mut inter, mut pm, mut gm) = (vec![T::zero(); k], vec![T::zero(); k], vec![T::zero(); k]);
        for (row, &l) in p.chunks_exact(k).zip(&self.labels) {
            for (c, &v) in row.iter().enumerate() {
                pm[c] += v;
            }
            inter[l as usize] += row[l as usize];
            gm[l as usize] += T::one();
        }
        (inter, pm, gm)
    }
}

impl<T: Real> Op<T> for SoftDiceOp<T> {
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let k = x[0].last_dim();
        let p = softmax_rows(x[0]);
        let (inter, pm, gm) = self.sums(&p, k);
        let two = T::lit(2.0);
        let kf = T::from_usize(k).unwrap();
        let denom: Vec<T> = (0..k).map(|c| pm[c] + gm[c] + self.smooth).collect();
        let mut dz = vec![T::zero(); p.len()];
        let mut dp = vec![T::zero(); k];
        for ((prow, drow), &l) in p.chunks_exact(k).zip(dz.chunks_exact_mut(k)).zip(&self.labels) {
            for c in 0..k {
                let gi = if l as usize == c { T::one() } else { T::zero() };
                let num = two * inter[c] + self.smooth;
                dp[c] = -g.item() / kf * (two * gi * denom[c] - num) / (denom[c] * denom[c]);
            }
            let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for c in 0..k {
                drow[c] = prow[c] * (dp[c] - dot);
            }
        }
        Ok(vec![Some(Tensor::from_vec(x[0].shape(), dz)?)])
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Mean absolute error against a constant target, optionally weighted
    /// elementwise (`sum w|x - t| / sum w`).
    pub fn l1_loss(&mut self, x: Var, target: &Tensor<T>, weight: Option<&Tensor<T>>) -> Result<Var> {
        same_shape("l1_loss", self.shape(x), target.shape())?;
        if let Some(w) = weight {
            same_shape("l1_loss", target.shape(), w.shape())?;
        }
        let xs = self.value(x).data();
        let mut total = T::zero();
        for (i, (&a, &b)) in xs.iter().zip(target.data()).enumerate() {
            let w = weight.map_or(T::one(), |w| w.data()[i]);
            total += w * (a - b).abs();
        }
        let norm = match weight {
            Some(w) => w.sum(),
            None => T::from_usize(xs.len()).unwrap(),
        };
        let norm = if norm > T::zero() { norm } else { T::one() };
        let op = L1Op { target: target.clone(), weight: weight.cloned(), norm };
        Ok(self.push(Tensor::scalar(total / norm), &[x], op))
    }

    /// Mean SSIM of `x` against a constant `target` (differentiable in `x`).
    pub fn ssim(&mut self, x: Var, target: &Tensor<T>, window: SsimWindow, dynamic_range: f64) -> Result<Var> {
        let v = ssim_value(self.value(x), target, window, dynamic_range)?;
        let op = SsimOp {
            target: target.clone(),
            taps: window.taps().into_iter().map(T::lit).collect(),
            c1: T::lit((0.01 * dynamic_range).powi(2)),
            c2: T::lit((0.03 * dynamic_range).powi(2)),
        };
        Ok(self.push(Tensor::scalar(v), &[x], op))
    }

    /// Softmax cross-entropy of `[.., k]` logits against class labels.
    ///
    /// Without class weights this is the plain mean over positions; with
    /// weights it is `sum w[l_i] ce_i / sum w[l_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], class_weights: Option<&[f64]>) -> Result<Var> {
        let lt = self.value(logits);
        let k = lt.last_dim();
        check_labels("cross_entropy", lt.rows(), k, labels)?;
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(TensorError::shape("cross_entropy", format!("{k} class weights"), format!("{}", w.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(TensorError::invalid("cross_entropy", "class weights must be finite and nonnegative"));
            }
        }
        let mut op = CrossEntropyOp {
            labels: labels.to_vec(),
            class_weights: class_weights.map(|w| w.iter().map(|&v| T::lit(v)).collect()),
            norm: T::one(),
        };
        let mut total = T::zero();
        let mut norm = T::zero();
        for (row, &l) in lt.data().chunks_exact(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            let w = op.weight(l);
            total += w * (lse - row[l as usize]);
            norm += w;
        }
        op.norm = if norm > T::zero() { norm } else { T::one() };
        let v = total / op.norm;
        Ok(self.push(Tensor::scalar(v), &[logits], op))
    }

    /// `1 - mean_k dice_k` over softmax probabilities, with
    /// `dice_k = (2 I_k + s) / (P_k + G_k + s)` summed over all positions.
    pub fn soft_dice_loss(&mut self, logits: Var, labels: &[u32], smooth: f64) -> Result<Var> {
        let lt = self.value(logits);
        let k = lt.last_dim();
        check_labels("soft_dice_loss", lt.rows(), k, labels)?;
        let op = SoftDiceOp { labels: labels.to_vec(), smooth: T::lit(smooth) };
        let p = softmax_rows(lt);
        let (inter, pm, gm) = op.sums(&p, k);
        let mean_dice = (0..k)
            .map(|c| (T::lit(2.0) * inter[c] + op.smooth) / (pm[c] + gm[c] + op.smooth))
            .sum::<T>()
            / T::from_usize(k).unwrap();
        Ok(self.push(Tensor::scalar(T::one() - mean_dice), &[logits], op))
    }
}
