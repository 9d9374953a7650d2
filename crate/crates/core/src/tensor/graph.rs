use super::kernels::{self, ConvGeom};
use super::{compensated_sum, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// `x` viewed as `[outer, len, inner]` times `s[len]`.
    ScaleAxis {
        x: usize,
        s: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(usize),
    /// Output element `i` reads input element `index[i]`.
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        scale: usize,
        outer: usize,
        c: usize,
        inner: usize,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    Softmax {
        x: usize,
        n: usize,
    },
    L2Normalize {
        x: usize,
        n: usize,
        norms: Vec<T>,
        eps: T,
    },
    Gap {
        x: usize,
        plane: usize,
    },
    Sum(usize),
    Mean(usize),
    L1 {
        a: usize,
        b: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over tensors with reverse-mode differentiation.
///
/// A graph is single-use: [`Graph::backward`] consumes the recorded gradient
/// information and a second call fails with [`Error::GraphConsumed`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every grad-tracked leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf. Leaves the loss does not depend on get exact zeros.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes.get(v.0)?.as_ref()?;
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shapes.get(v.0)?.clone()?;
        Some(match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        })
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn four(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected rank-4 tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Registers a grad-tracked leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: usize) -> &[T] {
        self.nodes[v].value.data()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        let data: Vec<T> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, mk(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x.0);
        self.push(value, Op::Scale(x.0, c), rg)
    }

    /// Multiplies every slice along `axis` by the matching entry of the 1-D tensor `s`.
    pub fn scale_axis(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(s) != [shape[axis]] {
            return Err(Error::shape(
                "scale_axis",
                format!("x {shape:?}, axis {axis}, s {:?}", self.shape(s)),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let sd = self.data(s.0);
        let xd = self.data(x.0);
        let mut out = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                out.extend(xd[base..base + inner].iter().map(|&v| v * sd[j]));
            }
        }
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ScaleAxis {
                x: x.0,
                s: s.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let xd = self.data(x.0);
        let data = index.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, data), Op::Gather { x: x.0, index }, rg)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{shape:?} axis {axis} range {start}..{}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(x, out_shape, index))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {base_shape:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base_shape:?}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in xs.iter().zip(&lens) {
                let d = self.data(v.0);
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(v.0));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                outer,
                lens,
                inner,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r}")));
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let mut index = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for j in 0..cols {
                for i in 0..rows {
                    index.push(b * rows * cols + i * cols + j);
                }
            }
        }
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        Ok(self.gather(x, out_shape, index))
    }

    /// Batched product over leading axes: `[.., m, k] x [.., k, n]`, or
    /// `[.., m, k] x [.., n, k]^T` when `trans_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        kernels::bmm(batch, m, k, n, self.data(a.0), self.data(b.0), trans_b, &mut out, false);
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Affine map along the last axis with `weight: [dout, din]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let din = *sx.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if sw.len() != 2 || sw[1] != din {
            return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let dout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {dout} outputs", self.shape(b)),
                ));
            }
        }
        let rows = sx.iter().product::<usize>() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            let bd = self.data(b.0);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.data(x.0),
            din as isize,
            1,
            self.data(weight.0),
            1,
            din as isize,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x.0) || self.rg(weight.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    /// Bias-free 2-D convolution, `input: [B, Cin, H, W]`, `kernel: [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let [batch, cin, h, w] = four("conv2d", self.shape(input))?;
        let [cout, cin_g, kh, kw] = four("conv2d", self.shape(kernel))?;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {groups} must divide Cin {cin} and Cout {cout}"),
            ));
        }
        if cin_g != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {cin_g} channels per group, input has {}", cin / groups),
            ));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
        };
        let out = kernels::conv2d_forward(&geom, self.data(input.0), self.data(kernel.0));
        let shape = vec![batch, cout, geom.out_h(), geom.out_w()];
        let rg = self.rg(input.0) || self.rg(kernel.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x: input.0,
                w: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Scale-only layer normalisation over axis 1 (channels) at every other position.
    pub fn layer_norm(&mut self, x: Var, scale: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(scale) != [shape[1]] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {shape:?}, scale {:?}", self.shape(scale)),
            ));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        let xd = self.data(x.0);
        let sd = self.data(scale.0);
        let mut normed = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        let cn = T::count(c);
        for o in 0..outer {
            for p in 0..inner {
                let at = |j: usize| (o * c + j) * inner + p;
                let mean = (0..c).map(|j| xd[at(j)]).sum::<T>() / cn;
                let var = (0..c)
                    .map(|j| {
                        let d = xd[at(j)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / cn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + p] = is;
                for j in 0..c {
                    let n = (xd[at(j)] - mean) * is;
                    normed[at(j)] = n;
                    out[at(j)] = n * sd[j];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(scale.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                scale: scale.0,
                outer,
                c,
                inner,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        let rg = self.rg(x.0);
        self.push(value, Op::Gelu(x.0), rg)
    }

    /// Max-stabilised softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .filter(|&&n| n > 0)
            .ok_or_else(|| Error::shape("softmax", format!("{shape:?}")))?;
        let xd = self.data(x.0);
        if !xd.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![T::zero(); xd.len()];
        for (src, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x: x.0, n }, rg))
    }

    /// Divides each last-axis row by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .filter(|&&n| n > 0)
            .ok_or_else(|| Error::shape("l2_normalize", format!("{shape:?}")))?;
        let xd = self.data(x.0);
        let mut out = vec![T::zero(); xd.len()];
        let mut norms = Vec::with_capacity(xd.len() / n);
        for (src, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
            let norm = src.iter().map(|v| *v * *v).sum::<T>().sqrt();
            norms.push(norm);
            let d = norm.max(eps);
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s / d;
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize {
                x: x.0,
                n,
                norms,
                eps,
            },
            rg,
        ))
    }

    /// `[B, C, H, W] -> [B, C/r^2, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = four("pixel_shuffle", self.shape(x))?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{c} channels not divisible by {}", r * r),
            ));
        }
        let co = c / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut index = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ic = oc * r * r + (oy % r) * r + (ox % r);
                        index.push(((bi * c + ic) * h + oy / r) * w + ox / r);
                    }
                }
            }
        }
        Ok(self.gather(x, vec![b, co, ho, wo], index))
    }

    /// `[B, C, H, W] -> [B, C*r^2, H/r, W/r]`, the inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = four("pixel_unshuffle", self.shape(x))?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                format!("{h}x{w} not divisible by {r}"),
            ));
        }
        let (ho, wo) = (h / r, w / r);
        let co = c * r * r;
        let mut index = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for oc in 0..co {
                let (ic, dy, dx) = (oc / (r * r), (oc % (r * r)) / r, oc % r);
                for oy in 0..ho {
                    for ox in 0..wo {
                        index.push(((bi * c + ic) * h + oy * r + dy) * w + ox * r + dx);
                    }
                }
            }
        }
        Ok(self.gather(x, vec![b, co, ho, wo], index))
    }

    /// Mirror padding of the two spatial axes of a `[B, C, H, W]` tensor.
    pub fn pad_reflect(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let [b, c, h, w] = four("pad_reflect", self.shape(x))?;
        let (ho, wo) = (h + top + bottom, w + left + right);
        let mut index = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            for oy in 0..ho {
                let iy = kernels::reflect_index(oy as isize - top as isize, h);
                for ox in 0..wo {
                    let ix = kernels::reflect_index(ox as isize - left as isize, w);
                    index.push((plane * h + iy) * w + ix);
                }
            }
        }
        Ok(self.gather(x, vec![b, c, ho, wo], index))
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = four("global_average_pool", self.shape(x))?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_average_pool", "empty spatial extent"));
        }
        let n = T::count(plane);
        let data = self
            .data(x.0)
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::from_parts(vec![b, c], data),
            Op::Gap { x: x.0, plane },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = compensated_sum(self.data(x.0));
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x.0);
        let s = compensated_sum(d) / T::count(d.len().max(1));
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Mean absolute difference; the subgradient at exact ties is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(pred), self.shape(target));
        if sa != sb {
            return Err(Error::shape("l1_loss", format!("{sa:?} vs {sb:?}")));
        }
        let a = self.data(pred.0);
        let b = self.data(target.0);
        let n = T::count(a.len().max(1));
        let total: T = a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).sum();
        let rg = self.rg(pred.0) || self.rg(target.0);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::L1 {
                a: pred.0,
                b: target.0,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|node| {
                (matches!(node.op, Op::Leaf) && node.requires_grad)
                    .then(|| node.value.shape().to_vec())
            })
            .collect::<Vec<_>>();
        for (g, s) in grads.iter_mut().zip(&shapes) {
            if s.is_none() {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        let numel = |j: usize| nodes[j].value.numel();
        // Accumulator for input `j`, allocated on first use.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], j: usize, len: usize) -> &'a mut Vec<T> {
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if want(*a) {
                    for (d, s) in slot(grads, *a, numel(*a)).iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if want(*b) {
                    for (d, s) in slot(grads, *b, numel(*b)).iter_mut().zip(g) {
                        *d += sign * *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = self.data(*b);
                    for ((d, s), y) in slot(grads, *a, numel(*a)).iter_mut().zip(g).zip(bd) {
                        *d += *s * *y;
                    }
                }
                if want(*b) {
                    let ad = self.data(*a);
                    for ((d, s), x) in slot(grads, *b, numel(*b)).iter_mut().zip(g).zip(ad) {
                        *d += *s * *x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    for (d, s) in slot(grads, *x, numel(*x)).iter_mut().zip(g) {
                        *d += *s * *c;
                    }
                }
            }
            &Op::ScaleAxis {
                x,
                s,
                outer,
                len,
                inner,
            } => {
                let xd = self.data(x);
                let sd = self.data(s);
                if want(x) {
                    let gx = slot(grads, x, numel(x));
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for t in base..base + inner {
                                gx[t] += g[t] * sd[j];
                            }
                        }
                    }
                }
                if want(s) {
                    let gs = slot(grads, s, len);
                    for o in 0..outer {
                        for (j, gsj) in gs.iter_mut().enumerate() {
                            let base = (o * len + j) * inner;
                            let mut acc = T::zero();
                            for t in base..base + inner {
                                acc += g[t] * xd[t];
                            }
                            *gsj += acc;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    for (d, s) in slot(grads, *x, numel(*x)).iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            Op::Gather { x, index } => {
                if want(*x) {
                    let gx = slot(grads, *x, numel(*x));
                    for (&src, &gv) in index.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Concat {
                xs,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&x, &len) in xs.iter().zip(lens) {
                    if want(x) {
                        let gx = slot(grads, x, numel(x));
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if want(a) {
                    let ga = slot(grads, a, numel(a));
                    for t in 0..batch {
                        let go = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bd[t * k * n..(t + 1) * k * n];
                        // ga[m,k] += go[m,n] * op(b)^T[n,k]
                        let (rsb, csb) = if trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(m, n, k, T::one(), go, n as isize, 1, bb, rsb, csb, T::one(), &mut ga[t * m * k..(t + 1) * m * k], k as isize, 1);
                    }
                }
                if want(b) {
                    let gb = slot(grads, b, numel(b));
                    for t in 0..batch {
                        let go = &g[t * m * n..(t + 1) * m * n];
                        let ab = &ad[t * m * k..(t + 1) * m * k];
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            // gb[n,k] += go^T[n,m] * a[m,k]
                            T::gemm(n, m, k, T::one(), go, 1, n as isize, ab, k as isize, 1, T::one(), dst, k as isize, 1);
                        } else {
                            // gb[k,n] += a^T[k,m] * go[m,n]
                            T::gemm(k, m, n, T::one(), ab, 1, k as isize, go, n as isize, 1, T::one(), dst, n as isize, 1);
                        }
                    }
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if want(x) {
                    let wd = self.data(w);
                    let gx = slot(grads, x, rows * din);
                    T::gemm(rows, dout, din, T::one(), g, dout as isize, 1, wd, din as isize, 1, T::one(), gx, din as isize, 1);
                }
                if want(w) {
                    let xd = self.data(x);
                    let gw = slot(grads, w, dout * din);
                    T::gemm(dout, rows, din, T::one(), g, 1, dout as isize, xd, din as isize, 1, T::one(), gw, din as isize, 1);
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    let gb = slot(grads, b, dout);
                    for r in 0..rows {
                        for (d, s) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *d += *s;
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, ref geom } => {
                let xd = self.data(x);
                let wd = self.data(w);
                let mut gx = want(x).then(|| grads[x].take().unwrap_or_else(|| vec![T::zero(); numel(x)]));
                let mut gw = want(w).then(|| grads[w].take().unwrap_or_else(|| vec![T::zero(); numel(w)]));
                kernels::conv2d_backward(geom, xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(v) = gx {
                    grads[x] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w] = Some(v);
                }
            }
            Op::LayerNorm {
                x,
                scale,
                outer,
                c,
                inner,
                normed,
                inv_std,
            } => {
                let (x, scale, outer, c, inner) = (*x, *scale, *outer, *c, *inner);
                let sd = self.data(scale);
                if want(scale) {
                    let gs = slot(grads, scale, c);
                    for o in 0..outer {
                        for (j, gsj) in gs.iter_mut().enumerate() {
                            let base = (o * c + j) * inner;
                            let mut acc = T::zero();
                            for p in 0..inner {
                                acc += g[base + p] * normed[base + p];
                            }
                            *gsj += acc;
                        }
                    }
                }
                if want(x) {
                    let cn = T::count(c);
                    let gx = slot(grads, x, outer * c * inner);
                    for o in 0..outer {
                        for p in 0..inner {
                            let at = |j: usize| (o * c + j) * inner + p;
                            let mut mean_g = T::zero();
                            let mut mean_gn = T::zero();
                            for j in 0..c {
                                let gh = g[at(j)] * sd[j];
                                mean_g += gh;
                                mean_gn += gh * normed[at(j)];
                            }
                            mean_g = mean_g / cn;
                            mean_gn = mean_gn / cn;
                            let is = inv_std[o * inner + p];
                            for j in 0..c {
                                let gh = g[at(j)] * sd[j];
                                gx[at(j)] += is * (gh - mean_g - normed[at(j)] * mean_gn);
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xd = self.data(*x);
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    for ((d, s), &v) in slot(grads, *x, xd.len()).iter_mut().zip(g).zip(xd) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                        *d += *s * (cdf + v * pdf);
                    }
                }
            }
            &Op::Softmax { x, n } => {
                if want(x) {
                    let y = nodes[i].value.data();
                    let gx = slot(grads, x, y.len());
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, n, norms, eps } => {
                let (x, n, eps) = (*x, *n, *eps);
                if want(x) {
                    let y = nodes[i].value.data();
                    let gx = slot(grads, x, y.len());
                    for (r, ((yr, gr), dr)) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let norm = norms[r];
                        if norm > eps {
                            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += (gv - yv * dot) / norm;
                            }
                        } else {
                            for (d, &gv) in dr.iter_mut().zip(gr) {
                                *d += gv / eps;
                            }
                        }
                    }
                }
            }
            &Op::Gap { x, plane } => {
                if want(x) {
                    let inv = T::one() / T::count(plane);
                    let gx = slot(grads, x, numel(x));
                    for (chunk, &gv) in gx.chunks_mut(plane).zip(g) {
                        for d in chunk {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    for d in slot(grads, *x, numel(*x)).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let gv = g[0] / T::count(numel(*x).max(1));
                    for d in slot(grads, *x, numel(*x)).iter_mut() {
                        *d += gv;
                    }
                }
            }
            &Op::L1 { a, b } => {
                let ad = self.data(a);
                let bd = self.data(b);
                let gv = g[0] / T::count(ad.len().max(1));
                let sign = |d: T| {
                    if d > T::zero() {
                        gv
                    } else if d < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                };
                if want(a) {
                    for ((d, &x), &y) in slot(grads, a, ad.len()).iter_mut().zip(ad).zip(bd) {
                        *d += sign(x - y);
                    }
                }
                if want(b) {
                    for ((d, &x), &y) in slot(grads, b, bd.len()).iter_mut().zip(ad).zip(bd) {
                        *d -= sign(x - y);
                    }
                }
            }
        }
    }
}
