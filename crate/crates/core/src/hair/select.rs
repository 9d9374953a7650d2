//! Kernel selection: a per-block affine map plus softmax turns the GIV into a
//! selecting vector, which mixes the rows of a shared weight box into the
//! parameters of one transformer block.

use rand::Rng;

use crate::arch::{transformer_block_forward, BlockHyper, ParamLayout};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Global information vector of one image, length `2C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Giv(pub Vec<f64>);

impl Giv {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self(t.data().iter().map(|&v| Scalar::as_f64(v)).collect())
    }

    /// Splits a `[B, 2C]` batch into per-image vectors.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>) -> Vec<Self> {
        let width = t.shape().last().copied().unwrap_or(0).max(1);
        t.data()
            .chunks(width)
            .map(|row| Self(row.iter().map(|&v| Scalar::as_f64(v)).collect()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mixing coefficients over the rows of a weight box.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectingVector(pub Vec<f64>);

impl SelectingVector {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self(t.data().iter().map(|&v| Scalar::as_f64(v)).collect())
    }

    /// Entries in `[0, 1]` summing to one within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|v| (0.0..=1.0).contains(v))
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// `N` complete parameter sets for the blocks of one stage, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBox<T> {
    rows: Tensor<T>,
    layout: ParamLayout,
    level: usize,
}

impl<T: Scalar> WeightBox<T> {
    pub fn new(rows: Tensor<T>, layout: ParamLayout, level: usize) -> Result<Self> {
        match *rows.shape() {
            [n, p] if n >= 1 && p == layout.len() => {}
            ref s => {
                return Err(Error::shape(
                    "WeightBox",
                    format!("rows {s:?}, expected [N >= 1, {}]", layout.len()),
                ))
            }
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite(format!("weight box at level {level}")));
        }
        Ok(Self { rows, layout, level })
    }

    /// Each row is drawn independently with the layout's default initialiser.
    pub fn init(layout: ParamLayout, size: usize, level: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut data = Vec::with_capacity(size * layout.len());
        for _ in 0..size {
            data.extend(layout.init::<T>(rng));
        }
        let rows = Tensor::new(vec![size, layout.len()], data)?;
        Self::new(rows, layout, level)
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn into_rows(self) -> Tensor<T> {
        self.rows
    }

    pub fn size(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn level(&self) -> usize {
        self.level
    }
}

/// Affine map `2C -> N` owned by one block.
#[derive(Clone, Copy, Debug)]
pub struct FcnnVars {
    pub weight: Var,
    pub bias: Var,
}

/// Graph handles of one hyper block: its own selector and the shared box.
#[derive(Clone, Copy, Debug)]
pub struct HyperTransBlock {
    pub fcnn: FcnnVars,
    pub weight_box: Var,
    pub hyper: BlockHyper,
}

/// PyTorch-style `nn.Linear` initial values, uniform in `±1/sqrt(in)`.
pub fn init_fcnn<T: Scalar>(giv_len: usize, box_size: usize, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / (giv_len as f64).sqrt();
    let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect() };
    let weight = Tensor::from_parts(vec![box_size, giv_len], draw(box_size * giv_len));
    let bias = Tensor::from_parts(vec![box_size], draw(box_size));
    (weight, bias)
}

/// `softmax(W giv + b)`: `giv: [2C]`, result `[N]`.
pub fn hsn_select<T: Scalar>(g: &mut Graph<T>, giv: Var, fcnn: FcnnVars) -> Result<Var> {
    let len = g.shape(giv).iter().product::<usize>();
    let w_shape = g.shape(fcnn.weight).to_vec();
    if w_shape.len() != 2 || w_shape[1] != len || g.shape(fcnn.bias) != [w_shape[0]] {
        return Err(Error::shape(
            "hsn_select",
            format!(
                "giv of length {len} with weight {w_shape:?} and bias {:?}",
                g.shape(fcnn.bias)
            ),
        ));
    }
    let row = g.reshape(giv, &[1, len])?;
    let logits = g.linear(row, fcnn.weight, Some(fcnn.bias))?;
    let vs = g.softmax(logits)?;
    g.reshape(vs, &[w_shape[0]])
}

/// `w = sum_i vs_i * box_i`: `vs: [N]`, `weight_box: [N, P]`, result `[P]`.
pub fn weightbox_mix<T: Scalar>(g: &mut Graph<T>, vs: Var, weight_box: Var) -> Result<Var> {
    let b = g.shape(weight_box).to_vec();
    if b.len() != 2 || b[0] == 0 {
        return Err(Error::shape("weightbox_mix", format!("weight box {b:?} is empty or not a matrix")));
    }
    if g.shape(vs) != [b[0]] {
        return Err(Error::shape(
            "weightbox_mix",
            format!("selecting vector {:?} for {} rows", g.shape(vs), b[0]),
        ));
    }
    let row = g.reshape(vs, &[1, b[0]])?;
    let w = g.matmul(row, weight_box, false)?;
    g.reshape(w, &[b[1]])
}

/// Runs the block with parameters generated from `giv`.
pub fn hypertrans_forward<T: Scalar>(g: &mut Graph<T>, x: Var, giv: Var, block: &HyperTransBlock) -> Result<Var> {
    let vs = hsn_select(g, giv, block.fcnn)?;
    hypertrans_forward_selected(g, x, vs, block)
}

/// As [`hypertrans_forward`] with an externally supplied selecting vector.
pub fn hypertrans_forward_selected<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vs: Var,
    block: &HyperTransBlock,
) -> Result<Var> {
    let w = weightbox_mix(g, vs, block.weight_box)?;
    transformer_block_forward(g, x, w, &block.hyper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn zero_fcnn_is_uniform() {
        let mut g = Graph::<f64>::new();
        let giv = g.constant(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let fcnn = FcnnVars {
            weight: g.constant(Tensor::zeros(&[5, 4])),
            bias: g.constant(Tensor::zeros(&[5])),
        };
        let vs = hsn_select(&mut g, giv, fcnn).unwrap();
        assert!(g.value(vs).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_row_selects_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, b) = init_fcnn::<f64>(4, 1, &mut rng);
        let mut g = Graph::<f64>::new();
        let giv = g.constant(t(&[4], &[7.0, -2.0, 3.0, 0.5]));
        let fcnn = FcnnVars {
            weight: g.constant(w),
            bias: g.constant(b),
        };
        let vs = hsn_select(&mut g, giv, fcnn).unwrap();
        assert_eq!(g.value(vs).data(), &[1.0]);
    }

    #[test]
    fn closed_form_softmax() {
        let mut g = Graph::<f64>::new();
        let giv = g.constant(t(&[2], &[0.0, 0.0]));
        let fcnn = FcnnVars {
            weight: g.constant(Tensor::zeros(&[2, 2])),
            bias: g.constant(t(&[2], &[0.0, 3f64.ln()])),
        };
        let vs = hsn_select(&mut g, giv, fcnn).unwrap();
        let v = g.value(vs).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let giv = g.constant(Tensor::zeros(&[3]));
        let fcnn = FcnnVars {
            weight: g.constant(Tensor::zeros(&[2, 4])),
            bias: g.constant(Tensor::zeros(&[2])),
        };
        assert!(hsn_select(&mut g, giv, fcnn).is_err());
    }

    #[test]
    fn hand_computed_mix() {
        let mut g = Graph::<f64>::new();
        let vs = g.constant(t(&[3], &[0.2, 0.3, 0.5]));
        let rows = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = weightbox_mix(&mut g, vs, rows).unwrap();
        let w = g.value(w).data();
        assert!((w[0] - 3.6).abs() < 1e-12 && (w[1] - 4.6).abs() < 1e-12);
    }

    #[test]
    fn one_hot_and_equal_rows() {
        let mut g = Graph::<f64>::new();
        let rows_t = t(&[3, 2], &[1.5, -2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = g.constant(rows_t.clone());
        let one_hot = g.constant(t(&[3], &[1.0, 0.0, 0.0]));
        let w = weightbox_mix(&mut g, one_hot, rows).unwrap();
        assert_eq!(g.value(w).data(), &rows_t.data()[..2]);

        let same = g.constant(t(&[3, 2], &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]));
        let vs = g.constant(t(&[3], &[0.125, 0.375, 0.5]));
        let w = weightbox_mix(&mut g, vs, same).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, -1.0]);
    }

    #[test]
    fn mix_errors() {
        let mut g = Graph::<f64>::new();
        let vs = g.constant(Tensor::zeros(&[2]));
        let rows = g.constant(Tensor::zeros(&[3, 4]));
        assert!(weightbox_mix(&mut g, vs, rows).is_err());
        let empty = g.constant(Tensor::zeros(&[0, 4]));
        let none = g.constant(Tensor::zeros(&[0]));
        assert!(weightbox_mix(&mut g, none, empty).is_err());
    }

    #[test]
    fn weight_box_validation() {
        let layout = ParamLayout::new(BlockHyper::new(4, 1, 2.0).unwrap()).unwrap();
        assert!(WeightBox::<f64>::new(Tensor::zeros(&[0, 421]), layout.clone(), 1).is_err());
        assert!(WeightBox::<f64>::new(Tensor::zeros(&[2, 420]), layout.clone(), 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = WeightBox::<f64>::init(layout, 3, 2, &mut rng).unwrap();
        assert_eq!(b.size(), 3);
        assert_ne!(b.rows().data()[4..16], b.rows().data()[421 + 4..421 + 16]);
    }

    #[test]
    fn simplex_predicate() {
        assert!(SelectingVector(vec![0.25, 0.75]).is_simplex(1e-12));
        assert!(!SelectingVector(vec![0.5, 0.6]).is_simplex(1e-6));
        assert!(!SelectingVector(vec![-0.1, 1.1]).is_simplex(1e-6));
        assert!(!SelectingVector(vec![]).is_simplex(1e-6));
    }
}
