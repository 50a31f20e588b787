//! 2D convolution and transposed convolution kernels (forward and backward).
//!
//! Both lower to a matrix product over an unfolded ("im2col") buffer. Images of
//! a batch are folded into the column dimension so that small feature maps
//! still produce reasonably sized products.

use crate::diffcore::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Upper bound on the unfolded buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

/// Layer geometry. Weights are always laid out `(out_channels, in_channels, kernel_h, kernel_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Square-kernel convolution with "same"-style padding (`dilation * (k - 1) / 2`).
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
            transposed: false,
        }
    }

    pub fn dilated(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self { padding: dilation * (kernel - 1) / 2, dilation, ..Self::new(in_channels, out_channels, kernel, 1) }
    }

    /// Transposed convolution; padding `(kernel - stride) / 2` gives an exact `stride`x upsample.
    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            padding: kernel.saturating_sub(stride) / 2,
            transposed: true,
            ..Self::new(in_channels, out_channels, kernel, stride)
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Number of kernel weights plus biases.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w + self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(shape_err!("kernel extents, stride and dilation must be >= 1: {:?}", self));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(shape_err!("channel counts must be >= 1: {:?}", self));
        }
        Ok(())
    }

    /// Spatial output extent for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |n: usize, k: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            if self.transposed {
                let full = (n - 1) * self.stride + span;
                full.checked_sub(2 * self.padding)
                    .filter(|&o| o > 0)
                    .ok_or_else(|| shape_err!("transposed conv output would be empty for input {n}"))
            } else {
                let padded = n + 2 * self.padding;
                if padded < span {
                    return Err(shape_err!("input extent {n} smaller than kernel span {span}"));
                }
                Ok((padded - span) / self.stride + 1)
            }
        };
        Ok((f(h, self.kernel_h)?, f(w, self.kernel_w)?))
    }

    fn check_params<T: Scalar>(&self, weights: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<()> {
        self.validate()?;
        if weights.shape() != self.weight_shape() {
            return Err(shape_err!(
                "weight shape {:?} does not match layer {:?} (want {:?})",
                weights.shape(),
                self,
                self.weight_shape()
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(shape_err!("bias shape {:?}, want [{}]", b.shape(), self.out_channels));
            }
        }
        Ok(())
    }
}

/// Geometry of a plain (non-transposed) convolution from `hi x wi` to `ho x wo`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    hi: usize,
    wi: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `c x hi x wi` image into `col[row * ld + off + pixel]`.
fn im2col<T: Scalar>(src: &[T], g: &Geom, col: &mut [T], ld: usize, off: usize) {
    let (hi, wi) = (g.hi as isize, g.wi as isize);
    for ch in 0..g.c {
        let plane = &src[ch * g.hi * g.wi..(ch + 1) * g.hi * g.wi];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ld + off..row * ld + off + g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= hi {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.wi..(iy as usize + 1) * g.wi];
                    let x0 = (kx * g.dil) as isize - g.pad as isize;
                    if g.stride == 1 && x0 >= 0 && x0 + g.wo as isize <= wi {
                        line.copy_from_slice(&src_row[x0 as usize..x0 as usize + g.wo]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        *v = if ix >= 0 && ix < wi { src_row[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `c x hi x wi` image.
fn col2im<T: Scalar>(col: &[T], g: &Geom, ld: usize, off: usize, dst: &mut [T]) {
    let (hi, wi) = (g.hi as isize, g.wi as isize);
    for ch in 0..g.c {
        let plane = &mut dst[ch * g.hi * g.wi..(ch + 1) * g.hi * g.wi];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let srcc = &col[row * ld + off..row * ld + off + g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= hi {
                        continue;
                    }
                    let line = &srcc[oy * g.wo..(oy + 1) * g.wo];
                    let dst_row = &mut plane[iy as usize * g.wi..(iy as usize + 1) * g.wi];
                    let x0 = (kx * g.dil) as isize - g.pad as isize;
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        if ix >= 0 && ix < wi {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn chunk_len(n: usize, per_image: usize) -> usize {
    (COL_BUDGET / per_image.max(1)).clamp(1, n)
}

/// Copies images `n0..n0+nb` of an `(N, C, S)` buffer into a `(C, nb * S)` matrix.
fn gather<T: Scalar>(src: &[T], c: usize, s: usize, n0: usize, nb: usize, dst: &mut [T]) {
    for j in 0..nb {
        for ch in 0..c {
            let from = &src[((n0 + j) * c + ch) * s..((n0 + j) * c + ch + 1) * s];
            dst[ch * nb * s + j * s..ch * nb * s + (j + 1) * s].copy_from_slice(from);
        }
    }
}

/// Inverse of [`gather`], optionally adding a per-channel bias.
fn scatter<T: Scalar>(src: &[T], c: usize, s: usize, n0: usize, nb: usize, bias: Option<&[T]>, dst: &mut [T]) {
    for j in 0..nb {
        for ch in 0..c {
            let out = &mut dst[((n0 + j) * c + ch) * s..((n0 + j) * c + ch + 1) * s];
            out.copy_from_slice(&src[ch * nb * s + j * s..ch * nb * s + (j + 1) * s]);
            if let Some(b) = bias {
                out.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for img in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += dy[(img * c + ch) * s..(img * c + ch + 1) * s].iter().copied().sum::<T>();
        }
    }
    db
}

/// Gradients produced by a convolution backward pass.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_geom(spec: &ConvSpec, hi: usize, wi: usize, ho: usize, wo: usize, c: usize) -> Geom {
    Geom {
        c,
        hi,
        wi,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
        ho,
        wo,
    }
}

fn check_input<T: Scalar>(spec: &ConvSpec, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(shape_err!("input has {} channels, layer expects {}", c, spec.in_channels));
    }
    Ok((n, c, h, w))
}

/// Forward pass of a convolution or transposed convolution on an `N x C x H x W` batch.
pub fn forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    spec.check_params(weights, bias)?;
    let (n, _, h, w) = check_input(spec, input)?;
    let (ho, wo) = spec.output_hw(h, w)?;
    let mut out = Tensor::zeros(&[n, spec.out_channels, ho, wo]);
    let bias = bias.map(|b| b.data());
    if spec.transposed {
        deconv_forward(input.data(), n, h, w, spec, weights.data(), bias, ho, wo, out.data_mut());
    } else {
        conv_forward(input.data(), n, h, w, spec, weights.data(), bias, ho, wo, out.data_mut());
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    wt: &[T],
    bias: Option<&[T]>,
    ho: usize,
    wo: usize,
    y: &mut [T],
) {
    let g = conv_geom(spec, h, w, ho, wo, spec.in_channels);
    let (rows, s, o) = (g.rows(), g.cols(), spec.out_channels);
    let nb_max = chunk_len(n, rows * s);
    let mut col = vec![T::zero(); rows * nb_max * s];
    let mut tmp = vec![T::zero(); o * nb_max * s];
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * s;
        for j in 0..nb {
            let img = &x[(n0 + j) * spec.in_channels * h * w..(n0 + j + 1) * spec.in_channels * h * w];
            im2col(img, &g, &mut col, ld, j * s);
        }
        T::gemm(o, rows, ld, wt, rows as isize, 1, &col, ld as isize, 1, T::zero(), &mut tmp, ld as isize, 1);
        scatter(&tmp, o, s, n0, nb, bias, y);
        n0 += nb;
    }
}

/// Weights `(Cout, Cin, K)` rearranged into a `(Cout * K, Cin)` matrix.
fn deconv_matrix<T: Scalar>(wt: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut a = vec![T::zero(); cout * k * cin];
    for o in 0..cout {
        for i in 0..cin {
            for kk in 0..k {
                a[(o * k + kk) * cin + i] = wt[(o * cin + i) * k + kk];
            }
        }
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn deconv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    wt: &[T],
    bias: Option<&[T]>,
    ho: usize,
    wo: usize,
    y: &mut [T],
) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    // the transposed layer is the data-gradient of a conv from (ho, wo) to (h, w)
    let g = conv_geom(spec, ho, wo, h, w, cout);
    let k = spec.kernel_h * spec.kernel_w;
    let a = deconv_matrix(wt, cout, cin, k);
    let (rows, s) = (g.rows(), h * w);
    let nb_max = chunk_len(n, rows * s);
    let mut xc = vec![T::zero(); cin * nb_max * s];
    let mut col = vec![T::zero(); rows * nb_max * s];
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * s;
        gather(x, cin, s, n0, nb, &mut xc);
        T::gemm(rows, cin, ld, &a, cin as isize, 1, &xc, ld as isize, 1, T::zero(), &mut col, ld as isize, 1);
        for j in 0..nb {
            let img = &mut y[(n0 + j) * cout * ho * wo..(n0 + j + 1) * cout * ho * wo];
            col2im(&col, &g, ld, j * s, img);
            if let Some(b) = bias {
                for (ch, plane) in img.chunks_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[ch]);
                }
            }
        }
        n0 += nb;
    }
}

/// Backward pass. `want_input` controls whether the input gradient is formed.
pub fn backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    spec.check_params(weights, None)?;
    let (n, _, h, w) = check_input(spec, input)?;
    let (ho, wo) = spec.output_hw(h, w)?;
    if grad_out.shape() != [n, spec.out_channels, ho, wo] {
        return Err(shape_err!("output gradient shape {:?} inconsistent with layer", grad_out.shape()));
    }
    let mut dw = Tensor::zeros(weights.shape());
    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    let db = bias_grad(grad_out.data(), n, spec.out_channels, ho * wo);
    let dx_buf = dx.as_mut().map(|t| t.data_mut());
    if spec.transposed {
        deconv_backward(input.data(), n, h, w, spec, weights.data(), grad_out.data(), ho, wo, dw.data_mut(), dx_buf);
    } else {
        conv_backward(input.data(), n, h, w, spec, weights.data(), grad_out.data(), ho, wo, dw.data_mut(), dx_buf);
    }
    Ok(ConvGrads { input: dx, weights: dw, bias: Tensor::from_vec(&[spec.out_channels], db)? })
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    wt: &[T],
    dy: &[T],
    ho: usize,
    wo: usize,
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let g = conv_geom(spec, h, w, ho, wo, spec.in_channels);
    let (rows, s, o) = (g.rows(), g.cols(), spec.out_channels);
    let nb_max = chunk_len(n, rows * s);
    let mut col = vec![T::zero(); rows * nb_max * s];
    let mut dyc = vec![T::zero(); o * nb_max * s];
    let img_len = spec.in_channels * h * w;
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * s;
        gather(dy, o, s, n0, nb, &mut dyc);
        for j in 0..nb {
            im2col(&x[(n0 + j) * img_len..(n0 + j + 1) * img_len], &g, &mut col, ld, j * s);
        }
        // dW (o x rows) += dY (o x ld) * col^T (ld x rows)
        T::gemm(o, ld, rows, &dyc, ld as isize, 1, &col, 1, ld as isize, T::one(), dw, rows as isize, 1);
        if let Some(dx) = dx.as_deref_mut() {
            // dcol (rows x ld) = W^T (rows x o) * dY (o x ld)
            T::gemm(rows, o, ld, wt, 1, rows as isize, &dyc, ld as isize, 1, T::zero(), &mut col, ld as isize, 1);
            for j in 0..nb {
                col2im(&col, &g, ld, j * s, &mut dx[(n0 + j) * img_len..(n0 + j + 1) * img_len]);
            }
        }
        n0 += nb;
    }
}

#[allow(clippy::too_many_arguments)]
fn deconv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    wt: &[T],
    dy: &[T],
    ho: usize,
    wo: usize,
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let g = conv_geom(spec, ho, wo, h, w, cout);
    let k = spec.kernel_h * spec.kernel_w;
    let a = deconv_matrix(wt, cout, cin, k);
    let (rows, s) = (g.rows(), h * w);
    let nb_max = chunk_len(n, rows * s);
    let mut xc = vec![T::zero(); cin * nb_max * s];
    let mut col = vec![T::zero(); rows * nb_max * s];
    let mut da = vec![T::zero(); rows * cin];
    let out_len = cout * ho * wo;
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * s;
        gather(x, cin, s, n0, nb, &mut xc);
        for j in 0..nb {
            im2col(&dy[(n0 + j) * out_len..(n0 + j + 1) * out_len], &g, &mut col, ld, j * s);
        }
        // dA (rows x cin) += dcol (rows x ld) * X^T (ld x cin)
        T::gemm(rows, ld, cin, &col, ld as isize, 1, &xc, 1, ld as isize, T::one(), &mut da, cin as isize, 1);
        if let Some(dx) = dx.as_deref_mut() {
            // dX (cin x ld) = A^T (cin x rows) * dcol (rows x ld)
            T::gemm(cin, rows, ld, &a, 1, cin as isize, &col, ld as isize, 1, T::zero(), &mut xc, ld as isize, 1);
            scatter(&xc, cin, s, n0, nb, None, dx);
        }
        n0 += nb;
    }
    for o in 0..cout {
        for i in 0..cin {
            for kk in 0..k {
                dw[(o * cin + i) * k + kk] = da[(o * k + kk) * cin + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::testutil::random_tensor;

    /// Straight six-loop cross-correlation, independent of the unfold path.
    fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (ho, wo) = spec.output_hw(h, w).unwrap();
        let mut y = Tensor::zeros(&[n, spec.out_channels, ho, wo]);
        for img in 0..n {
            for o in 0..spec.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.get(&[o]);
                        for ch in 0..c {
                            for ky in 0..spec.kernel_h {
                                for kx in 0..spec.kernel_w {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt.get(&[o, ch, ky, kx]) * x.get(&[img, ch, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        y.set(&[img, o, oy, ox], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = random_tensor(&[1, 1, 5, 6], 1);
        let spec = ConvSpec::new(1, 1, 1, 1);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = forward(&x, &spec, &w, Some(&Tensor::zeros(&[1]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sum_kernel_on_two_by_two() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 2, 1).with_padding(0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn matches_naive_loops() {
        let specs = [
            ConvSpec::new(3, 4, 3, 1),
            ConvSpec::new(3, 4, 3, 2),
            ConvSpec::dilated(3, 2, 3, 2),
            ConvSpec::new(3, 5, 1, 1),
        ];
        for (seed, spec) in specs.iter().enumerate() {
            let x = random_tensor(&[2, 3, 8, 8], 10 + seed as u64);
            let w = random_tensor(&spec.weight_shape(), 20 + seed as u64);
            let b = random_tensor(&[spec.out_channels], 30 + seed as u64);
            let got = forward(&x, spec, &w, Some(&b)).unwrap();
            let want = naive_conv(&x, spec, &w, &b);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn transposed_broadcasts_single_value() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let spec = ConvSpec::transposed(1, 1, 2, 2);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transposed_pipeline_layer_doubles_size() {
        let spec = ConvSpec::transposed(64, 32, 4, 2);
        assert_eq!(spec.padding, 1);
        assert_eq!(spec.output_hw(4, 4).unwrap(), (8, 8));
        let x = random_tensor(&[1, 64, 4, 4], 3);
        let w = random_tensor(&spec.weight_shape(), 4);
        assert_eq!(forward(&x, &spec, &w, None).unwrap().shape(), &[1, 32, 8, 8]);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        for (seed, (k, s)) in [(3usize, 1usize), (3, 2), (4, 2)].into_iter().enumerate() {
            let seed = seed as u64;
            let conv = ConvSpec::new(3, 4, k, s).with_padding(1);
            let deconv = ConvSpec { in_channels: 4, out_channels: 3, transposed: true, ..conv };
            let x = random_tensor(&[2, 3, 8, 8], 40 + seed);
            let wc = random_tensor(&conv.weight_shape(), 50 + seed);
            let y_shape = {
                let (ho, wo) = conv.output_hw(8, 8).unwrap();
                [2, 4, ho, wo]
            };
            let y = random_tensor(&y_shape, 60 + seed);
            // deconv weights (out=3, in=4) are the conv weights with the channel axes swapped
            let wd = Tensor::from_fn(&deconv.weight_shape(), |i| {
                let kk = conv.kernel_h * conv.kernel_w;
                let (o, rest) = (i / (4 * kk), i % (4 * kk));
                let (ci, q) = (rest / kk, rest % kk);
                wc.data()[(ci * 3 + o) * kk + q]
            });
            let cx = forward(&x, &conv, &wc, None).unwrap();
            let dy = forward(&y, &deconv, &wd, None).unwrap();
            if dy.shape() != x.shape() {
                // odd strides can lose a trailing row; only compare exact round shapes
                continue;
            }
            let lhs = cx.dot(&y);
            let rhs = x.dot(&dy);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "k={k} s={s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn rejects_channel_and_weight_mismatch() {
        let spec = ConvSpec::new(3, 4, 3, 1);
        let x = random_tensor(&[1, 2, 8, 8], 1);
        let w = random_tensor(&spec.weight_shape(), 2);
        assert!(forward(&x, &spec, &w, None).is_err());
        let x = random_tensor(&[1, 3, 8, 8], 1);
        let bad_w = random_tensor(&[4, 3, 1, 1], 2);
        assert!(forward(&x, &spec, &bad_w, None).is_err());
        assert!(ConvSpec { stride: 0, ..spec }.validate().is_err());
    }
}
