//! Raw numeric kernels on contiguous buffers: GEMM, im2col convolution,
//! pooling and axis slicing. The autodiff graph calls into these.

use crate::tensor::{Real, Result, Tensor, TensorError};

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `a` is logically `m×k`; when `a_trans` it is stored as `k×m`.
/// `b` is logically `k×n`; when `b_trans` it is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    a_trans: bool,
    b: &[Real],
    b_trans: bool,
    c: &mut [Real],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        #[cfg(not(feature = "f32"))]
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
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
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

/// Shape bookkeeping for a grouped 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "grouped_conv2d";
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let (batch, in_channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_channels, per_group, kernel_h, kernel_w) =
            (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(TensorError::invalid(
                OP,
                format!(
                    "channels in={in_channels} out={out_channels} not divisible by groups={groups}"
                ),
            ));
        }
        if per_group != in_channels / groups {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(TensorError::invalid(
                OP,
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {height}x{width}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    pub fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// 1×1, stride 1, no padding: the patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Offset of channel `c` of image `n` in the input buffer.
    fn input_offset(&self, n: usize, c: usize) -> usize {
        (n * self.in_channels + c) * self.height * self.width
    }

    fn output_offset(&self, n: usize, c: usize) -> usize {
        (n * self.out_channels + c) * self.out_positions()
    }
}

/// Unfold the channels of one group into a `patch_len × out_positions` matrix.
fn im2col(g: &ConvGeometry, x: &[Real], cols: &mut [Real]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let positions = g.out_positions();
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im(g: &ConvGeometry, cols: &[Real], dx: &mut [Real]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let positions = g.out_positions();
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Grouped convolution forward pass via im2col + GEMM.
pub fn conv2d_forward(g: &ConvGeometry, x: &[Real], w: &[Real]) -> Vec<Real> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let cog = g.out_per_group();
    let mut out = vec![0.0; g.batch * g.out_channels * positions];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * positions]
    };
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[g.input_offset(n, grp * g.in_per_group())..];
            let cols_ref: &[Real] = if g.is_pointwise() {
                &xs[..patch * positions]
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            let wg = &w[grp * cog * patch..(grp + 1) * cog * patch];
            let off = g.output_offset(n, grp * cog);
            gemm(
                cog,
                patch,
                positions,
                wg,
                false,
                cols_ref,
                false,
                &mut out[off..off + cog * positions],
                false,
            );
        }
    }
    out
}

/// Gradients of a grouped convolution with respect to input and weight.
/// Either side can be skipped.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let cog = g.out_per_group();
    let cig = g.in_per_group();
    let plane = g.height * g.width;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { patch * positions }];
    let mut dcols = vec![0.0; if want_dx && !g.is_pointwise() { patch * positions } else { 0 }];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let xoff = g.input_offset(n, grp * cig);
            let yoff = g.output_offset(n, grp * cog);
            let dyg = &dy[yoff..yoff + cog * positions];
            let wg = &w[grp * cog * patch..(grp + 1) * cog * patch];
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[Real] = if g.is_pointwise() {
                    &x[xoff..xoff + patch * positions]
                } else {
                    im2col(g, &x[xoff..], &mut cols);
                    &cols
                };
                gemm(
                    cog,
                    positions,
                    patch,
                    dyg,
                    false,
                    cols_ref,
                    true,
                    &mut dw[grp * cog * patch..(grp + 1) * cog * patch],
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                if g.is_pointwise() {
                    gemm(
                        patch,
                        cog,
                        positions,
                        wg,
                        true,
                        dyg,
                        false,
                        &mut dx[xoff..xoff + cig * plane],
                        false,
                    );
                } else {
                    gemm(patch, cog, positions, wg, true, dyg, false, &mut dcols, false);
                    col2im(g, &dcols, &mut dx[xoff..xoff + cig * plane]);
                }
            }
        }
    }
    (dx, dw)
}

/// Geometry of a max-pooling window over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(x_shape: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 4 || kernel == 0 || stride == 0 || padding >= kernel {
            return Err(TensorError::invalid(
                "max_pool2d",
                format!("bad geometry {x_shape:?} kernel={kernel} stride={stride} pad={padding}"),
            ));
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(TensorError::invalid("max_pool2d", "window larger than input"));
        }
        Ok(PoolGeometry {
            batch: x_shape[0],
            channels: x_shape[1],
            height: h,
            width: w,
            kernel,
            stride,
            padding,
            out_h: (h + 2 * padding - kernel) / stride + 1,
            out_w: (w + 2 * padding - kernel) / stride + 1,
        })
    }
}

/// Max pooling; returns values and the flat input index of every maximum.
pub fn max_pool2d_forward(g: &PoolGeometry, x: &[Real]) -> (Vec<Real>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = Real::NEG_INFINITY;
                let mut best_at = base;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let at = base + iy as usize * g.width + ix as usize;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (out, arg)
}

/// View of a shape as `[outer, extent(axis), inner]`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
        return Err(TensorError::invalid(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
        ));
    }
    let (outer, extent, inner) = split_at_axis(t.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenate along `axis`; all other extents must agree.
pub(crate) fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut total = 0;
    for p in parts {
        let same_rank = p.ndim() == first.ndim();
        let compatible = same_rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let ext = p.shape()[axis];
            data.extend_from_slice(&p.data()[o * ext * inner..(o + 1) * ext * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, true);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn geometry_rejects_indivisible_groups() {
        let err = ConvGeometry::new(&[1, 6, 4, 4], &[4, 2, 3, 3], 1, 1, 4).unwrap_err();
        assert!(matches!(err, TensorError::Invalid { .. }), "{err}");
    }

    #[test]
    fn strided_geometry() {
        let g = ConvGeometry::new(&[1, 4, 7, 7], &[8, 2, 3, 3], 2, 1, 2).unwrap();
        assert_eq!(g.output_shape(), [1, 8, 4, 4]);
        let g = ConvGeometry::new(&[1, 3, 224, 224], &[64, 3, 7, 7], 2, 3, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let g = PoolGeometry::new(&[1, 1, 4, 4], 2, 2, 0).unwrap();
        let x: Vec<Real> = (0..16).map(|v| v as Real).collect();
        let (out, arg) = max_pool2d_forward(&g, &x);
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn slice_and_concat_invert() {
        let t = Tensor::from_fn([2, 5, 3], |i| i as Real);
        let a = slice_axis(&t, 1, 0, 2).unwrap();
        let b = slice_axis(&t, 1, 2, 3).unwrap();
        assert_eq!(concat_axis(&[&a, &b], 1).unwrap(), t);
    }
}
