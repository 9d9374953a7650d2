//! Raw slice kernels behind the graph operations.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn patch_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if k < len + pad {
        ((len - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let cin_g = g.cin_g();
    for c in 0..cin_g {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, oh);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let cin_g = g.cin_g();
    for c in 0..cin_g {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, oh);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, ow);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        for (d, s) in drow[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                            *d += *s;
                        }
                    } else {
                        for ox in xlo..xhi {
                            drow[ox * g.stride + kj - g.pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    if g.cin_g() == 1 && g.cout_g() == 1 {
        depthwise_forward(g, input, weight, &mut out);
        return out;
    }
    let rows = g.patch_rows();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    let in_plane = g.h * g.w;
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let img = &input[(b * g.cin + grp * g.cin_g()) * in_plane..][..g.cin_g() * in_plane];
            let patches: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            let w = &weight[grp * g.cout_g() * rows..(grp + 1) * g.cout_g() * rows];
            let o = &mut out[(b * g.cout + grp * g.cout_g()) * plane..][..g.cout_g() * plane];
            T::gemm(
                g.cout_g(),
                rows,
                plane,
                T::one(),
                w,
                rows as isize,
                1,
                patches,
                plane as isize,
                1,
                T::zero(),
                o,
                plane as isize,
                1,
            );
        }
    }
    out
}

/// Accumulates input and weight gradients of a convolution.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
) {
    if g.cin_g() == 1 && g.cout_g() == 1 {
        depthwise_backward(g, input, weight, grad_out, grad_input, grad_weight);
        return;
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let rows = g.patch_rows();
    let in_plane = g.h * g.w;
    let mut col = vec![T::zero(); rows * plane];
    let mut gcol = vec![T::zero(); rows * plane];
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let in_off = (b * g.cin + grp * g.cin_g()) * in_plane;
            let go = &grad_out[(b * g.cout + grp * g.cout_g()) * plane..][..g.cout_g() * plane];
            let w_range = grp * g.cout_g() * rows..(grp + 1) * g.cout_g() * rows;
            if let Some(gw) = grad_weight.as_deref_mut() {
                let img = &input[in_off..in_off + g.cin_g() * in_plane];
                let patches: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, &mut col);
                    &col
                };
                // gw[cout_g, rows] += go[cout_g, plane] * patches^T[plane, rows]
                T::gemm(
                    g.cout_g(),
                    plane,
                    rows,
                    T::one(),
                    go,
                    plane as isize,
                    1,
                    patches,
                    1,
                    plane as isize,
                    T::one(),
                    &mut gw[w_range.clone()],
                    rows as isize,
                    1,
                );
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                let w = &weight[w_range];
                let gi = &mut gi[in_off..in_off + g.cin_g() * in_plane];
                if g.is_pointwise() {
                    // gi[rows, plane] += w^T[rows, cout_g] * go[cout_g, plane]
                    T::gemm(
                        rows,
                        g.cout_g(),
                        plane,
                        T::one(),
                        w,
                        1,
                        rows as isize,
                        go,
                        plane as isize,
                        1,
                        T::one(),
                        gi,
                        plane as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        rows,
                        g.cout_g(),
                        plane,
                        T::one(),
                        w,
                        1,
                        rows as isize,
                        go,
                        plane as isize,
                        1,
                        T::zero(),
                        &mut gcol,
                        plane as isize,
                        1,
                    );
                    col2im_add(g, &gcol, gi);
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cout {
            let src = &input[(b * g.cin + c) * in_plane..][..in_plane];
            let dst = &mut out[(b * g.cout + c) * oh * ow..][..oh * ow];
            let k = &weight[c * ksz..(c + 1) * ksz];
            for ki in 0..g.kh {
                let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, oh);
                for kj in 0..g.kw {
                    let wv = k[ki * g.kw + kj];
                    let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, ow);
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = xlo + kj - g.pad;
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(&srow[ix0..ix0 + (xhi - xlo)]) {
                                *d += wv * *s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * srow[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cout {
            let src = &input[(b * g.cin + c) * in_plane..][..in_plane];
            let go = &grad_out[(b * g.cout + c) * oh * ow..][..oh * ow];
            for ki in 0..g.kh {
                let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, oh);
                for kj in 0..g.kw {
                    let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, ow);
                    let wv = weight[c * ksz + ki * g.kw + kj];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = xlo + kj - g.pad;
                            let srow = &src[iy * g.w + ix0..iy * g.w + ix0 + (xhi - xlo)];
                            for (s, d) in srow.iter().zip(&grow[xlo..xhi]) {
                                acc += *s * *d;
                            }
                            if let Some(gi) = grad_input.as_deref_mut() {
                                let girow = &mut gi[(b * g.cin + c) * in_plane + iy * g.w + ix0..][..xhi - xlo];
                                for (s, d) in girow.iter_mut().zip(&grow[xlo..xhi]) {
                                    *s += wv * *d;
                                }
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kj - g.pad;
                                acc += src[iy * g.w + ix] * grow[ox];
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    gi[(b * g.cin + c) * in_plane + iy * g.w + ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    if let Some(gw) = grad_weight.as_deref_mut() {
                        gw[c * ksz + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
}

/// `out[b] = a[b] * op(b[b])` where `op` optionally transposes the last two axes.
pub(crate) fn bmm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    trans_b: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        let ab = &a[i * m * k..(i + 1) * m * k];
        let bb = &b[i * k * n..(i + 1) * k * n];
        let ob = &mut out[i * m * n..(i + 1) * m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(m, k, n, T::one(), ab, k as isize, 1, bb, rsb, csb, beta, ob, n as isize, 1);
    }
}

/// Index into `[0, len)` mirrored without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let mut out = vec![0.0; g.batch * g.cout * oh * ow];
        for b in 0..g.batch {
            for oc in 0..g.cout {
                let grp = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..cin_g {
                            let c = grp * cin_g + ic;
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((oc * cin_g + ic) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((b * g.cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_paths_match_naive_loops() {
        let cases = [
            (2, 4, 5, 6, 6, 3, 3, 1, 1, 1),
            (1, 4, 7, 5, 8, 3, 3, 2, 1, 1),
            (1, 6, 6, 6, 6, 3, 3, 1, 1, 6),
            (2, 6, 7, 7, 6, 3, 3, 2, 1, 6),
            (1, 4, 4, 4, 8, 1, 1, 1, 0, 1),
            (1, 4, 5, 5, 4, 3, 3, 1, 1, 2),
            (1, 2, 3, 3, 2, 3, 3, 3, 2, 1),
        ];
        for &(batch, cin, h, w, cout, kh, kw, stride, pad, groups) in &cases {
            let g = ConvGeom { batch, cin, h, w, cout, kh, kw, stride, pad, groups };
            let x = ramp(batch * cin * h * w, 0.1);
            let wt = ramp(cout * (cin / groups) * kh * kw, 0.05);
            let fast = conv2d_forward(&g, &x, &wt);
            let slow = naive_conv(&g, &x, &wt);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reflect_index_mirrors() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }
}
