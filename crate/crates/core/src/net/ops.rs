//! Dense feature-map kernels with their adjoints.
//!
//! Convolutions are lowered to GEMM through `im2col`/`col2im`. All buffers are
//! row-major `f64`; channel-major layout `C x H x W` for feature maps.

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size mismatch");
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Static geometry of a convolution or transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn transpose_out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.padding,
            (w - 1) * self.stride + self.kernel - 2 * self.padding,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `C = op(A) * op(B) + beta * C` with `op(A)` of shape `m x k`, `op(B)` of
/// shape `k x n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` (`c x h x w`) into a `(c*k*k) x (oh*ow)` patch matrix.
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cols_n = oh * ow;
    let mut cols = vec![0.0; c * k * k * cols_n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // Contiguous run of valid columns.
                        let lo = pad.saturating_sub(kj);
                        let hi = ow.min((w + pad).saturating_sub(kj));
                        if lo < hi {
                            let off = lo + kj - pad;
                            out[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back onto `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cols_n = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in s.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(y: &mut FeatureMap, bias: &[f64]) {
    for (c, &b) in bias.iter().enumerate() {
        if b != 0.0 {
            y.plane_mut(c).iter_mut().for_each(|v| *v += b);
        }
    }
}

fn accumulate_bias_grad(dy: &FeatureMap, db: &mut [f64]) {
    for (c, g) in db.iter_mut().enumerate() {
        *g += dy.plane(c).iter().sum::<f64>();
    }
}

/// Convolution with weights `out_ch x in_ch x k x k` and one bias per output channel.
pub fn conv2d_forward(x: &FeatureMap, weight: &[f64], bias: &[f64], g: ConvGeom) -> FeatureMap {
    assert_eq!(x.channels, g.in_ch, "conv input channels");
    let (oh, ow) = g.conv_out(x.height, x.width);
    let mut y = FeatureMap::zeros(g.out_ch, oh, ow);
    let kk = g.in_ch * g.kernel * g.kernel;
    if g.is_pointwise() {
        gemm(g.out_ch, kk, oh * ow, weight, false, &x.data, false, 0.0, &mut y.data);
    } else {
        let (cols, _, _) = im2col(&x.data, x.channels, x.height, x.width, g.kernel, g.stride, g.padding);
        gemm(g.out_ch, kk, oh * ow, weight, false, &cols, false, 0.0, &mut y.data);
    }
    add_bias(&mut y, bias);
    y
}

/// Accumulates weight and bias gradients into `dw`/`db` and returns the input
/// gradient when `need_dx` is set.
pub fn conv2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    g: ConvGeom,
    dy: &FeatureMap,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<FeatureMap> {
    let kk = g.in_ch * g.kernel * g.kernel;
    let p = dy.plane_len();
    accumulate_bias_grad(dy, db);
    if g.is_pointwise() {
        gemm(g.out_ch, p, kk, &dy.data, false, &x.data, true, 1.0, dw);
        if !need_dx {
            return None;
        }
        let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
        gemm(kk, g.out_ch, p, weight, true, &dy.data, false, 0.0, &mut dx.data);
        return Some(dx);
    }
    let (cols, _, _) = im2col(&x.data, x.channels, x.height, x.width, g.kernel, g.stride, g.padding);
    gemm(g.out_ch, p, kk, &dy.data, false, &cols, true, 1.0, dw);
    if !need_dx {
        return None;
    }
    let mut dcols = cols;
    gemm(kk, g.out_ch, p, weight, true, &dy.data, false, 0.0, &mut dcols);
    let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
    col2im(&dcols, x.channels, x.height, x.width, g.kernel, g.stride, g.padding, &mut dx.data);
    Some(dx)
}

/// Transposed convolution with weights `in_ch x out_ch x k x k`.
pub fn conv_transpose2d_forward(x: &FeatureMap, weight: &[f64], bias: &[f64], g: ConvGeom) -> FeatureMap {
    assert_eq!(x.channels, g.in_ch, "transposed conv input channels");
    let (oh, ow) = g.transpose_out(x.height, x.width);
    let rows = g.out_ch * g.kernel * g.kernel;
    let p = x.plane_len();
    let mut cols = vec![0.0; rows * p];
    gemm(rows, g.in_ch, p, weight, true, &x.data, false, 0.0, &mut cols);
    let mut y = FeatureMap::zeros(g.out_ch, oh, ow);
    col2im(&cols, g.out_ch, oh, ow, g.kernel, g.stride, g.padding, &mut y.data);
    add_bias(&mut y, bias);
    y
}

pub fn conv_transpose2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    g: ConvGeom,
    dy: &FeatureMap,
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<FeatureMap> {
    accumulate_bias_grad(dy, db);
    let rows = g.out_ch * g.kernel * g.kernel;
    let p = x.plane_len();
    let (dcols, _, _) = im2col(&dy.data, dy.channels, dy.height, dy.width, g.kernel, g.stride, g.padding);
    gemm(g.in_ch, p, rows, &x.data, false, &dcols, true, 1.0, dw);
    if !need_dx {
        return None;
    }
    let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
    gemm(g.in_ch, rows, p, weight, false, &dcols, false, 0.0, &mut dx.data);
    Some(dx)
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the rectified output `y` is not positive.
pub fn relu_backward_inplace(dy: &mut FeatureMap, y: &FeatureMap) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Max pooling; returns the pooled map and, per output, the flat input index of its maximum.
pub fn maxpool_forward(x: &FeatureMap, kernel: usize, stride: usize, pad: usize) -> (FeatureMap, Vec<usize>) {
    let oh = (x.height + 2 * pad - kernel) / stride + 1;
    let ow = (x.width + 2 * pad - kernel) / stride + 1;
    let mut y = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; y.data.len()];
    for c in 0..x.channels {
        let base = c * x.plane_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let i = base + iy as usize * x.width + ix as usize;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &FeatureMap, argmax: &[usize], input: (usize, usize, usize)) -> FeatureMap {
    let mut dx = FeatureMap::zeros(input.0, input.1, input.2);
    for (&i, &g) in argmax.iter().zip(&dy.data) {
        dx.data[i] += g;
    }
    dx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
