//! Forward and backward kernels for the non-convolution operators.
//!
//! Every function here is a pure function of its arguments. Spatial tensors
//! are `N x C x H x W`; a displacement list is ordered as the caller provides.

use crate::diffcore::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const COSINE_EPS: f64 = 1e-9;

// ----------------------------------------------------------------------------
// batch normalization

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Per-channel statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    train: bool,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || state.mean.len() != c {
        return Err(shape_err!("batch norm parameters do not match {c} channels"));
    }
    let s = h * w;
    let count = n * s;
    if train && count < 2 {
        return Err(shape_err!("batch norm in train mode needs at least two values per channel, got {count}"));
    }
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let xd = x.data();
    if train {
        let m = T::lit(BN_MOMENTUM);
        let cnt = T::lit(count as f64);
        for ch in 0..c {
            let mut sum = T::zero();
            for img in 0..n {
                sum += xd[(img * c + ch) * s..(img * c + ch + 1) * s].iter().copied().sum::<T>();
            }
            let mu = sum / cnt;
            let mut sq = T::zero();
            for img in 0..n {
                for &v in &xd[(img * c + ch) * s..(img * c + ch + 1) * s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            let var = sq / cnt;
            mean[ch] = mu;
            inv_std[ch] = T::one() / (var + eps).sqrt();
            let unbiased = sq / T::lit((count - 1) as f64);
            state.mean[ch] = (T::one() - m) * state.mean[ch] + m * mu;
            state.var[ch] = (T::one() - m) * state.var[ch] + m * unbiased;
        }
    } else {
        for ch in 0..c {
            mean[ch] = state.mean[ch];
            inv_std[ch] = T::one() / (state.var[ch] + eps).sqrt();
        }
    }
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            let range = (img * c + ch) * s..(img * c + ch + 1) * s;
            for (o, &v) in yd[range.clone()].iter_mut().zip(&xd[range]) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok((y, BnSaved { mean, inv_std, train }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let s = h * w;
    let cnt = T::lit((n * s) as f64);
    let (xd, dyd) = (x.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is, g) = (saved.mean[ch], saved.inv_std[ch], gamma.data()[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for img in 0..n {
            let r = (img * c + ch) * s..(img * c + ch + 1) * s;
            for (&v, &d) in xd[r.clone()].iter().zip(&dyd[r]) {
                sum_dy += d;
                sum_dy_xhat += d * (v - mu) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let dxd = dx.data_mut();
        for img in 0..n {
            let r = (img * c + ch) * s..(img * c + ch + 1) * s;
            for ((o, &v), &d) in dxd[r.clone()].iter_mut().zip(&xd[r.clone()]).zip(&dyd[r]) {
                *o = if saved.train {
                    let xhat = (v - mu) * is;
                    g * is * (d - sum_dy / cnt - xhat * sum_dy_xhat / cnt)
                } else {
                    g * is * d
                };
            }
        }
    }
    Ok((dx, Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?))
}

// ----------------------------------------------------------------------------
// elementwise

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, d| if v > T::zero() { d } else { T::zero() }).expect("relu shapes")
}

// ----------------------------------------------------------------------------
// softmax

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("softmax axis {axis} out of range for {:?}", shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - mx).exp();
                yd[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                yd[at(k)] /= z;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd, dd) = (y.data(), dy.data(), dx.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                dd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Ok(dx)
}

// ----------------------------------------------------------------------------
// bilinear warping

struct Bilinear<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

impl<T: Scalar> Bilinear<T> {
    fn at(sx: T, sy: T) -> Self {
        let (fx0, fy0) = (sx.floor(), sy.floor());
        Self {
            x0: fx0.to_isize().unwrap_or(isize::MIN / 2),
            y0: fy0.to_isize().unwrap_or(isize::MIN / 2),
            fx: sx - fx0,
            fy: sy - fy0,
        }
    }

    /// The four corners as `(y, x, weight, d weight/d x, d weight/d y)`.
    fn corners(&self) -> [(isize, isize, T, T, T); 4] {
        let one = T::one();
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
            (self.y0, self.x0 + 1, fx * (one - fy), one - fy, -fx),
            (self.y0 + 1, self.x0, (one - fx) * fy, -fy, one - fx),
            (self.y0 + 1, self.x0 + 1, fx * fy, fy, fx),
        ]
    }
}

fn check_flow<T: Scalar>(target: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = target.dims4()?;
    if flow.shape() != [n, 2, h, w] {
        return Err(shape_err!("flow shape {:?} does not match target {:?}", flow.shape(), target.shape()));
    }
    Ok((n, c, h, w))
}

/// Samples `target` at `p + flow(p)`; returns the warped tensor and an `N x 1 x H x W`
/// mask that is 0 where the sample lies entirely outside the image.
pub fn warp_forward<T: Scalar>(target: &Tensor<T>, flow: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_flow(target, flow)?;
    let s = h * w;
    let mut out = Tensor::zeros(target.shape());
    let mut valid = Tensor::zeros(&[n, 1, h, w]);
    let (td, fd) = (target.data(), flow.data());
    let (hi, wi) = (h as isize, w as isize);
    let od = out.data_mut();
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::lit(x as f64) + fd[(img * 2) * s + p];
                let sy = T::lit(y as f64) + fd[(img * 2 + 1) * s + p];
                let inside = sx > -T::one() && sx < T::lit(w as f64) && sy > -T::one() && sy < T::lit(h as f64);
                valid.data_mut()[img * s + p] = if inside { T::one() } else { T::zero() };
                if !inside {
                    continue;
                }
                let b = Bilinear::at(sx, sy);
                for (cy, cx, wgt, _, _) in b.corners() {
                    if cy < 0 || cy >= hi || cx < 0 || cx >= wi || wgt == T::zero() {
                        continue;
                    }
                    let q = cy as usize * w + cx as usize;
                    for ch in 0..c {
                        od[(img * c + ch) * s + p] += wgt * td[(img * c + ch) * s + q];
                    }
                }
            }
        }
    }
    Ok((out, valid))
}

/// Returns `(d target, d flow)`.
pub fn warp_backward<T: Scalar>(
    target: &Tensor<T>,
    flow: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_flow(target, flow)?;
    let s = h * w;
    let mut dt = Tensor::zeros(target.shape());
    let mut df = Tensor::zeros(flow.shape());
    let (td, fd, gd) = (target.data(), flow.data(), dout.data());
    let (hi, wi) = (h as isize, w as isize);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::lit(x as f64) + fd[(img * 2) * s + p];
                let sy = T::lit(y as f64) + fd[(img * 2 + 1) * s + p];
                if !(sx > -T::one() && sx < T::lit(w as f64) && sy > -T::one() && sy < T::lit(h as f64)) {
                    continue;
                }
                let b = Bilinear::at(sx, sy);
                let (mut du, mut dv) = (T::zero(), T::zero());
                for (cy, cx, wgt, dwx, dwy) in b.corners() {
                    if cy < 0 || cy >= hi || cx < 0 || cx >= wi {
                        continue;
                    }
                    let q = cy as usize * w + cx as usize;
                    for ch in 0..c {
                        let g = gd[(img * c + ch) * s + p];
                        let tv = td[(img * c + ch) * s + q];
                        dt.data_mut()[(img * c + ch) * s + q] += wgt * g;
                        du += dwx * tv * g;
                        dv += dwy * tv * g;
                    }
                }
                df.data_mut()[(img * 2) * s + p] = du;
                df.data_mut()[(img * 2 + 1) * s + p] = dv;
            }
        }
    }
    Ok((dt, df))
}

// ----------------------------------------------------------------------------
// bilinear upsampling

/// Source taps for one output coordinate under half-pixel alignment with edge clamping.
fn upsample_taps(o: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear `factor`x upsampling, multiplying values by `value_scale`.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize, value_scale: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(shape_err!("upsampling factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = upsample_taps(oy, factor, h);
            let ly = T::lit(ly);
            for ox in 0..wo {
                let (x0, x1, lx) = upsample_taps(ox, factor, w);
                let lx = T::lit(lx);
                let one = T::one();
                let v = (one - ly) * ((one - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * ((one - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                yd[plane * ho * wo + oy * wo + ox] = v * value_scale;
            }
        }
    }
    Ok(y)
}

pub fn upsample_backward<T: Scalar>(x_shape: &[usize], factor: usize, value_scale: T, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    let gd = dy.data();
    let one = T::one();
    for plane in 0..n * c {
        let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, ly) = upsample_taps(oy, factor, h);
            let ly = T::lit(ly);
            for ox in 0..wo {
                let (x0, x1, lx) = upsample_taps(ox, factor, w);
                let lx = T::lit(lx);
                let g = gd[plane * ho * wo + oy * wo + ox] * value_scale;
                dst[y0 * w + x0] += (one - ly) * (one - lx) * g;
                dst[y0 * w + x1] += (one - ly) * lx * g;
                dst[y1 * w + x0] += ly * (one - lx) * g;
                dst[y1 * w + x1] += ly * lx * g;
            }
        }
    }
    dx
}

// ----------------------------------------------------------------------------
// displacement gathers

/// Integer displacement `(u, v)`: horizontal then vertical.
pub type Shift = (isize, isize);

fn check_pair<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    f1.same_shape(f2)?;
    f1.dims4()
}

/// Calls `f(p, q)` for every pixel `p` whose displaced partner `q = p + shift` lies inside.
#[inline]
fn for_shifted(h: usize, w: usize, (u, v): Shift, mut f: impl FnMut(usize, usize)) {
    let (hi, wi) = (h as isize, w as isize);
    for y in 0..hi {
        let ys = y + v;
        if ys < 0 || ys >= hi {
            continue;
        }
        let xa = (-u).max(0);
        let xb = (wi - u).min(wi);
        for x in xa..xb {
            f((y * wi + x) as usize, (ys * wi + x + u) as usize);
        }
    }
}

/// For every batch item and shift, stacks `f1` with `f2` displaced by the shift:
/// output item `n * D + k` has channels `[f1(p), f2(p + shift_k)]`, zero outside the image.
pub fn concat_displaced_forward<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, shifts: &[Shift]) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_pair(f1, f2)?;
    let s = h * w;
    let d = shifts.len();
    let mut out = Tensor::zeros(&[n * d, 2 * c, h, w]);
    let od = out.data_mut();
    for img in 0..n {
        let a = &f1.data()[img * c * s..(img + 1) * c * s];
        let b = &f2.data()[img * c * s..(img + 1) * c * s];
        for (k, &shift) in shifts.iter().enumerate() {
            let base = (img * d + k) * 2 * c * s;
            od[base..base + c * s].copy_from_slice(a);
            for ch in 0..c {
                let dst = &mut od[base + (c + ch) * s..base + (c + ch + 1) * s];
                let src = &b[ch * s..(ch + 1) * s];
                for_shifted(h, w, shift, |p, q| dst[p] = src[q]);
            }
        }
    }
    Ok(out)
}

pub fn concat_displaced_backward<T: Scalar>(
    shape: &[usize],
    shifts: &[Shift],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s = h * w;
    let d = shifts.len();
    let mut d1 = Tensor::zeros(shape);
    let mut d2 = Tensor::zeros(shape);
    let gd = dout.data();
    for img in 0..n {
        for (k, &shift) in shifts.iter().enumerate() {
            let base = (img * d + k) * 2 * c * s;
            for (o, &g) in d1.data_mut()[img * c * s..(img + 1) * c * s].iter_mut().zip(&gd[base..base + c * s]) {
                *o += g;
            }
            for ch in 0..c {
                let src = &gd[base + (c + ch) * s..base + (c + ch + 1) * s];
                let dst = &mut d2.data_mut()[(img * c + ch) * s..(img * c + ch + 1) * s];
                for_shifted(h, w, shift, |p, q| dst[q] += src[p]);
            }
        }
    }
    (d1, d2)
}

/// Per-pixel channel inner product `<f1(p), f2(p + shift_k)>` for every shift: `N x D x H x W`.
pub fn dot_corr_forward<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, shifts: &[Shift]) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_pair(f1, f2)?;
    let s = h * w;
    let d = shifts.len();
    let mut out = Tensor::zeros(&[n, d, h, w]);
    let od = out.data_mut();
    for img in 0..n {
        for (k, &shift) in shifts.iter().enumerate() {
            let dst = &mut od[(img * d + k) * s..(img * d + k + 1) * s];
            for ch in 0..c {
                let a = &f1.data()[(img * c + ch) * s..(img * c + ch + 1) * s];
                let b = &f2.data()[(img * c + ch) * s..(img * c + ch + 1) * s];
                for_shifted(h, w, shift, |p, q| dst[p] += a[p] * b[q]);
            }
        }
    }
    Ok(out)
}

pub fn dot_corr_backward<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    shifts: &[Shift],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2], f1.shape()[3]);
    let s = h * w;
    let d = shifts.len();
    let mut d1 = Tensor::zeros(f1.shape());
    let mut d2 = Tensor::zeros(f2.shape());
    for img in 0..n {
        for (k, &shift) in shifts.iter().enumerate() {
            let g = &dout.data()[(img * d + k) * s..(img * d + k + 1) * s];
            for ch in 0..c {
                let r = (img * c + ch) * s..(img * c + ch + 1) * s;
                let a = &f1.data()[r.clone()];
                let b = &f2.data()[r.clone()];
                {
                    let da = &mut d1.data_mut()[r.clone()];
                    for_shifted(h, w, shift, |p, q| da[p] += g[p] * b[q]);
                }
                let db = &mut d2.data_mut()[r];
                for_shifted(h, w, shift, |p, q| db[q] += g[p] * a[p]);
            }
        }
    }
    (d1, d2)
}

fn pixel_norms<T: Scalar>(f: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let s = h * w;
    let mut out = vec![T::zero(); n * s];
    for img in 0..n {
        for ch in 0..c {
            for (p, &v) in f.data()[(img * c + ch) * s..(img * c + ch + 1) * s].iter().enumerate() {
                out[img * s + p] += v * v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Cosine similarity `<a, b> / (|a| |b| + eps)` for every shift: `N x D x H x W`.
/// Pixels whose partner falls outside the image get similarity 0.
pub fn cos_corr_forward<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, shifts: &[Shift]) -> Result<Tensor<T>> {
    let (n, _, h, w) = check_pair(f1, f2)?;
    let s = h * w;
    let d = shifts.len();
    let dots = dot_corr_forward(f1, f2, shifts)?;
    let (na, nb) = (pixel_norms(f1), pixel_norms(f2));
    let eps = T::lit(COSINE_EPS);
    let mut out = Tensor::zeros(&[n, d, h, w]);
    for img in 0..n {
        for (k, &shift) in shifts.iter().enumerate() {
            let base = (img * d + k) * s;
            let od = out.data_mut();
            for_shifted(h, w, shift, |p, q| {
                od[base + p] = dots.data()[base + p] / (na[img * s + p] * nb[img * s + q] + eps);
            });
        }
    }
    Ok(out)
}

pub fn cos_corr_backward<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    shifts: &[Shift],
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_pair(f1, f2)?;
    let s = h * w;
    let d = shifts.len();
    let dots = dot_corr_forward(f1, f2, shifts)?;
    let (na, nb) = (pixel_norms(f1), pixel_norms(f2));
    let eps = T::lit(COSINE_EPS);
    // ds/da = b / D - dot * |b| * a / (|a| D^2) with D = |a||b| + eps, symmetric for b
    let mut ga = vec![T::zero(); n * d * s];
    let mut gb = vec![T::zero(); n * d * s];
    let mut ra = vec![T::zero(); n * s];
    let mut rb = vec![T::zero(); n * s];
    for img in 0..n {
        for (k, &shift) in shifts.iter().enumerate() {
            let base = (img * d + k) * s;
            for_shifted(h, w, shift, |p, q| {
                let (a, b) = (na[img * s + p], nb[img * s + q]);
                let den = a * b + eps;
                let g = dout.data()[base + p];
                ga[base + p] = g / den;
                let common = g * dots.data()[base + p] / (den * den);
                if a > T::zero() {
                    ra[img * s + p] += common * b / a;
                }
                if b > T::zero() {
                    rb[img * s + q] += common * a / b;
                }
                gb[base + p] = g / den;
            });
        }
    }
    let mut d1 = Tensor::zeros(f1.shape());
    let mut d2 = Tensor::zeros(f2.shape());
    for img in 0..n {
        for ch in 0..c {
            let r = (img * c + ch) * s..(img * c + ch + 1) * s;
            let a = &f1.data()[r.clone()];
            let b = &f2.data()[r.clone()];
            for p in 0..s {
                d1.data_mut()[r.start + p] -= ra[img * s + p] * a[p];
                d2.data_mut()[r.start + p] -= rb[img * s + p] * b[p];
            }
            for (k, &shift) in shifts.iter().enumerate() {
                let base = (img * d + k) * s;
                let da = &mut d1.data_mut()[r.clone()];
                for_shifted(h, w, shift, |p, q| da[p] += ga[base + p] * b[q]);
                let db = &mut d2.data_mut()[r.clone()];
                for_shifted(h, w, shift, |p, q| db[q] += gb[base + p] * a[p]);
            }
        }
    }
    Ok((d1, d2))
}

// ----------------------------------------------------------------------------
// spatial layout

/// Zero-pads at the bottom and right.
pub fn pad_br<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h + ph, w + pw);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        for r in 0..h {
            let src = &x.data()[plane * h * w + r * w..plane * h * w + (r + 1) * w];
            y.data_mut()[plane * ho * wo + r * wo..plane * ho * wo + r * wo + w].copy_from_slice(src);
        }
    }
    Ok(y)
}

/// Keeps the top-left `h x w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.dims4()?;
    if h > hi || w > wi || h == 0 || w == 0 {
        return Err(shape_err!("cannot crop {hi}x{wi} to {h}x{w}"));
    }
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        for r in 0..h {
            let src = &x.data()[plane * hi * wi + r * wi..plane * hi * wi + r * wi + w];
            y.data_mut()[plane * h * w + r * w..plane * h * w + (r + 1) * w].copy_from_slice(src);
        }
    }
    Ok(y)
}

/// Adjoint of [`crop`]: embeds into a zero `hi x wi` canvas.
pub fn uncrop<T: Scalar>(dy: &Tensor<T>, hi: usize, wi: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = dy.dims4()?;
    pad_br(dy, hi - h, wi - w)
}

/// Concatenates along the channel axis.
pub fn cat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!("cannot concatenate {:?} and {:?}", a.shape(), b.shape()));
    }
    let s = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * s);
    for img in 0..n {
        out.extend_from_slice(&a.data()[img * ca * s..(img + 1) * ca * s]);
        out.extend_from_slice(&b.data()[img * cb * s..(img + 1) * cb * s]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], out)
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let s = h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * s);
    let mut b = Vec::with_capacity(n * cb * s);
    for img in 0..n {
        a.extend_from_slice(&x.data()[img * c * s..(img * c + ca) * s]);
        b.extend_from_slice(&x.data()[(img * c + ca) * s..(img + 1) * c * s]);
    }
    Ok((Tensor::from_vec(&[n, ca, h, w], a)?, Tensor::from_vec(&[n, cb, h, w], b)?))
}

// ----------------------------------------------------------------------------
// losses

/// Mean over masked pixels of the Euclidean norm of `pred - gt` (both `N x 2 x H x W`).
/// Returns 0 when the mask is empty.
pub fn masked_epe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    let (n, _, h, w) = flow_pair_dims(pred, gt, mask)?;
    let s = h * w;
    let (mut acc, mut cnt) = (T::zero(), T::zero());
    for img in 0..n {
        for p in 0..s {
            let m = mask.data()[img * s + p];
            if m == T::zero() {
                continue;
            }
            let du = pred.data()[img * 2 * s + p] - gt.data()[img * 2 * s + p];
            let dv = pred.data()[(img * 2 + 1) * s + p] - gt.data()[(img * 2 + 1) * s + p];
            acc += m * (du * du + dv * dv).sqrt();
            cnt += m;
        }
    }
    Ok(if cnt > T::zero() { acc / cnt } else { T::zero() })
}

pub fn masked_epe_backward<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>, g: T) -> Result<Tensor<T>> {
    let (n, _, h, w) = flow_pair_dims(pred, gt, mask)?;
    let s = h * w;
    let cnt: T = mask.sum();
    let mut dp = Tensor::zeros(pred.shape());
    if cnt <= T::zero() {
        return Ok(dp);
    }
    for img in 0..n {
        for p in 0..s {
            let m = mask.data()[img * s + p];
            let (iu, iv) = (img * 2 * s + p, (img * 2 + 1) * s + p);
            let du = pred.data()[iu] - gt.data()[iu];
            let dv = pred.data()[iv] - gt.data()[iv];
            let norm = (du * du + dv * dv).sqrt();
            if m == T::zero() || norm == T::zero() {
                continue;
            }
            let k = g * m / (cnt * norm);
            dp.data_mut()[iu] = k * du;
            dp.data_mut()[iv] = k * dv;
        }
    }
    Ok(dp)
}

fn flow_pair_dims<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = pred.dims4()?;
    if c != 2 || gt.shape() != pred.shape() || mask.shape() != [n, 1, h, w] {
        return Err(shape_err!(
            "flow loss expects matching N x 2 x H x W prediction/target and N x 1 x H x W mask, got {:?} {:?} {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        ));
    }
    Ok((n, c, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::testutil::random_tensor;

    #[test]
    fn batchnorm_normalized_input_passes_through() {
        // channel values {-1, 1} repeated: mean 0, biased variance 1
        let x = Tensor::from_fn(&[2, 1, 2, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        let mut st = BnState::new(1);
        let (y, _) = batchnorm_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut st, true).unwrap();
        // exact up to the epsilon in the denominator
        let shrink = 1.0 / (1.0f64 + BN_EPS).sqrt();
        assert!(y.max_abs_diff(&x.map(|v| v * shrink)) < 1e-12);
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let x = random_tensor(&[3, 2, 4, 4], 7);
        let beta = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
        let mut st = BnState::new(2);
        let (y, _) = batchnorm_forward(&x, &Tensor::zeros(&[2]), &beta, &mut st, true).unwrap();
        for img in 0..3 {
            for ch in 0..2 {
                for p in 0..16 {
                    assert_eq!(y.data()[(img * 2 + ch) * 16 + p], beta.data()[ch]);
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_statistics_and_running_update() {
        let x = random_tensor(&[4, 3, 5, 5], 11).map(|v| 10.0 * v + 2.0);
        let mut st = BnState::new(3);
        let (y, _) = batchnorm_forward(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), &mut st, true).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> =
                (0..4).flat_map(|n| y.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
            assert!(st.mean[ch] != 0.0 && st.var[ch] != 1.0);
        }
    }

    #[test]
    fn batchnorm_rejects_single_value_in_train_mode() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let mut st = BnState::new(1);
        assert!(batchnorm_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut st, true).is_err());
        assert!(batchnorm_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut st, false).is_ok());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(&[4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_dominant_and_normalized() {
        let u = Tensor::<f64>::full(&[1, 5], 0.3);
        assert!(softmax(&u, 1).unwrap().data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let mut big = Tensor::<f64>::zeros(&[6]);
        big.set(&[2], 100.0);
        assert!((softmax(&big, 0).unwrap().get(&[2]) - 1.0).abs() < 1e-12);
        let r = random_tensor(&[3, 7, 2], 5).map(|v| 10.0 * v);
        let p = softmax(&r, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..7).map(|k| p.get(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let t = random_tensor(&[2, 3, 5, 7], 1);
        let (y, valid) = warp_forward(&t, &Tensor::zeros(&[2, 2, 5, 7])).unwrap();
        assert_eq!(y, t);
        assert!(valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn warp_integer_shift_moves_columns() {
        let t = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 + 1.0);
        let flow = Tensor::from_fn(&[1, 2, 3, 4], |i| if i < 12 { 1.0 } else { 0.0 });
        let (y, valid) = warp_forward(&t, &flow).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(y.get(&[0, 0, r, c]), t.get(&[0, 0, r, c + 1]));
                assert_eq!(valid.get(&[0, 0, r, c]), 1.0);
            }
            assert_eq!(y.get(&[0, 0, r, 3]), 0.0);
            assert_eq!(valid.get(&[0, 0, r, 3]), 0.0);
        }
    }

    #[test]
    fn warp_half_pixel_averages_neighbors() {
        let t = random_tensor(&[1, 2, 3, 5], 9);
        let flow = Tensor::from_fn(&[1, 2, 3, 5], |i| if i < 15 { 0.5 } else { 0.0 });
        let (y, _) = warp_forward(&t, &flow).unwrap();
        for ch in 0..2 {
            for r in 0..3 {
                for c in 0..4 {
                    let want = 0.5 * (t.get(&[0, ch, r, c]) + t.get(&[0, ch, r, c + 1]));
                    assert!((y.get(&[0, ch, r, c]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn upsample_constant_field_scales_values() {
        let x = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
        let y = upsample_forward(&x, 2, 2.0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn concat_displaced_shift_semantics() {
        let f1 = random_tensor(&[1, 2, 3, 4], 1);
        let f2 = random_tensor(&[1, 2, 3, 4], 2);
        let out = concat_displaced_forward(&f1, &f2, &[(0, 0), (1, 0)]).unwrap();
        assert_eq!(out.shape(), &[2, 4, 3, 4]);
        for ch in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(out.get(&[0, ch, y, x]), f1.get(&[0, ch, y, x]));
                    assert_eq!(out.get(&[0, 2 + ch, y, x]), f2.get(&[0, ch, y, x]));
                    let want = if x + 1 < 4 { f2.get(&[0, ch, y, x + 1]) } else { 0.0 };
                    assert_eq!(out.get(&[1, 2 + ch, y, x]), want);
                }
            }
        }
    }

    #[test]
    fn masked_epe_constant_error() {
        let gt = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
        let pred = Tensor::from_fn(&[1, 2, 2, 3], |i| if i < 6 { 3.0 } else { 4.0 });
        let mask = Tensor::full(&[1, 1, 2, 3], 1.0);
        assert_eq!(masked_epe(&pred, &gt, &mask).unwrap(), 5.0);
        assert_eq!(masked_epe(&pred, &gt, &Tensor::zeros(&[1, 1, 2, 3])).unwrap(), 0.0);
    }

    #[test]
    fn crop_undoes_pad() {
        let x = random_tensor(&[2, 3, 3, 5], 4);
        let p = pad_br(&x, 1, 3).unwrap();
        assert_eq!(p.shape(), &[2, 3, 4, 8]);
        assert_eq!(crop(&p, 3, 5).unwrap(), x);
    }
}
