use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Shape hyper-parameters of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockHyper {
    pub channels: usize,
    pub heads: usize,
    /// GDFN expansion factor (gamma).
    pub ffn_expansion: f64,
}

impl BlockHyper {
    pub fn new(channels: usize, heads: usize, ffn_expansion: f64) -> Result<Self> {
        let hyper = Self {
            channels,
            heads,
            ffn_expansion,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::invalid(
                "BlockHyper",
                format!("{} channels not divisible into {} heads", self.channels, self.heads),
            ));
        }
        if !(self.ffn_expansion.is_finite() && self.ffn_expansion > 0.0) || self.hidden() == 0 {
            return Err(Error::invalid(
                "BlockHyper",
                format!("expansion {} gives an empty feed-forward path", self.ffn_expansion),
            ));
        }
        Ok(())
    }

    /// Width of each of the two gated GDFN paths, `floor(gamma * C)`.
    /// The fused expand layer produces twice this, so its width is always even.
    pub fn hidden(&self) -> usize {
        (self.channels as f64 * self.ffn_expansion).floor() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// One named region of the flat block parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Convolution kernels are the rank-4 entries.
    pub fn is_conv(&self) -> bool {
        self.shape.len() == 4
    }

    /// Inputs feeding each output unit, used for initialisation bounds.
    pub fn fan_in(&self) -> usize {
        if self.is_conv() {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }
}

pub const MDTA_NORM: &str = "mdta.norm";
pub const MDTA_QKV: &str = "mdta.qkv";
pub const MDTA_QKV_DW: &str = "mdta.qkv_dw";
pub const MDTA_TEMPERATURE: &str = "mdta.temperature";
pub const MDTA_PROJECT_OUT: &str = "mdta.project_out";
pub const GDFN_NORM: &str = "gdfn.norm";
pub const GDFN_PROJECT_IN: &str = "gdfn.project_in";
pub const GDFN_DWCONV: &str = "gdfn.dwconv";
pub const GDFN_PROJECT_OUT: &str = "gdfn.project_out";

/// Ordered description of the flat parameter vector `w` of one transformer block.
///
/// The twelve logical convolutions of a block (separate Q, K, V projections and
/// depthwise convs, two gated GDFN paths, two output projections) are fused
/// into six physical kernels. The two layer-norm scales and the per-head
/// attention temperature also live in `w`, so `P` counts every learnable
/// parameter of the block.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    hyper: BlockHyper,
    entries: Vec<LayoutEntry>,
    mdta_len: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(hyper: BlockHyper) -> Result<Self> {
        hyper.validate()?;
        let c = hyper.channels;
        let hid = hyper.hidden();
        let specs: [(&'static str, Vec<usize>); 9] = [
            (MDTA_NORM, vec![c]),
            (MDTA_QKV, vec![3 * c, c, 1, 1]),
            (MDTA_QKV_DW, vec![3 * c, 1, 3, 3]),
            (MDTA_TEMPERATURE, vec![hyper.heads]),
            (MDTA_PROJECT_OUT, vec![c, c, 1, 1]),
            (GDFN_NORM, vec![c]),
            (GDFN_PROJECT_IN, vec![2 * hid, c, 1, 1]),
            (GDFN_DWCONV, vec![2 * hid, 1, 3, 3]),
            (GDFN_PROJECT_OUT, vec![c, hid, 1, 1]),
        ];
        let mut entries = Vec::with_capacity(specs.len());
        let mut offset = 0;
        let mut mdta_len = 0;
        for (name, shape) in specs {
            let e = LayoutEntry {
                name,
                shape,
                offset,
            };
            offset += e.len();
            if name == MDTA_PROJECT_OUT {
                mdta_len = offset;
            }
            entries.push(e);
        }
        Ok(Self {
            hyper,
            entries,
            mdta_len,
            total: offset,
        })
    }

    pub fn hyper(&self) -> BlockHyper {
        self.hyper
    }

    /// Total parameter count `P`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn conv_entries(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| e.is_conv())
    }

    /// `[0, mdta_len)` holds the attention half, the rest the feed-forward half.
    pub fn mdta_len(&self) -> usize {
        self.mdta_len
    }

    pub fn gdfn_len(&self) -> usize {
        self.total - self.mdta_len
    }

    /// Splits a flat vector into one tensor per entry.
    pub fn unflatten<T: Scalar>(&self, w: &[T]) -> Result<Vec<Tensor<T>>> {
        if w.len() != self.total {
            return Err(Error::shape(
                "unflatten",
                format!("expected {} values, got {}", self.total, w.len()),
            ));
        }
        self.entries
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), w[e.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ParamLayout::unflatten`].
    pub fn flatten<T: Scalar>(&self, parts: &[Tensor<T>]) -> Result<Vec<T>> {
        if parts.len() != self.entries.len() {
            return Err(Error::shape(
                "flatten",
                format!("expected {} tensors, got {}", self.entries.len(), parts.len()),
            ));
        }
        let mut w = Vec::with_capacity(self.total);
        for (e, t) in self.entries.iter().zip(parts) {
            if t.shape() != e.shape.as_slice() {
                return Err(Error::shape(
                    "flatten",
                    format!("{}: expected {:?}, got {:?}", e.name, e.shape, t.shape()),
                ));
            }
            w.extend_from_slice(t.data());
        }
        Ok(w)
    }

    /// Default initial values: unit norm scales and temperatures, conv kernels
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn init<T: Scalar>(&self, rng: &mut impl rand::Rng) -> Vec<T> {
        let mut w = Vec::with_capacity(self.total);
        for e in &self.entries {
            if e.is_conv() {
                let bound = 1.0 / (e.fan_in() as f64).sqrt();
                w.extend((0..e.len()).map(|_| T::from_f64(rng.gen_range(-bound..bound))));
            } else {
                w.extend(std::iter::repeat(T::one()).take(e.len()));
            }
        }
        w
    }
}
