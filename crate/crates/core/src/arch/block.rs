use super::layout::*;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;
/// Floor on row norms before normalising queries and keys.
pub const NORMALIZE_EPS: f64 = 1e-12;

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, hyper: &BlockHyper, op: &'static str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [b, c, h, w] if c == hyper.channels => Ok([b, c, h, w]),
        ref s => Err(Error::shape(
            op,
            format!("input {s:?} does not have {} channels", hyper.channels),
        )),
    }
}

/// Region `entry` of a parameter slice that starts at `base` in the full layout.
fn region<T: Scalar>(g: &mut Graph<T>, params: Var, layout: &ParamLayout, name: &str, base: usize) -> Result<Var> {
    let e = layout
        .entry(name)
        .ok_or_else(|| Error::invalid("layout", format!("no entry {name}")))?;
    let flat = g.narrow(params, 0, e.offset - base, e.len())?;
    g.reshape(flat, &e.shape)
}

fn expect_len<T: Scalar>(g: &Graph<T>, params: Var, len: usize, op: &'static str) -> Result<()> {
    if g.shape(params) != [len] {
        return Err(Error::shape(
            op,
            format!("parameter vector {:?}, expected [{len}]", g.shape(params)),
        ));
    }
    Ok(())
}

/// Multi-head transposed attention with residual: attention maps are
/// `C/heads x C/heads`, computed across channels rather than pixels.
///
/// `params` is the attention half of the block layout, `[mdta_len]`.
pub fn mdta_forward<T: Scalar>(g: &mut Graph<T>, x: Var, params: Var, hyper: &BlockHyper) -> Result<Var> {
    let layout = ParamLayout::new(*hyper)?;
    let [b, c, h, w] = check_input(g, x, hyper, "mdta_forward")?;
    expect_len(g, params, layout.mdta_len(), "mdta_forward")?;
    let heads = hyper.heads;
    let hd = hyper.head_dim();

    let norm = region(g, params, &layout, MDTA_NORM, 0)?;
    let qkv_k = region(g, params, &layout, MDTA_QKV, 0)?;
    let dw_k = region(g, params, &layout, MDTA_QKV_DW, 0)?;
    let temp = region(g, params, &layout, MDTA_TEMPERATURE, 0)?;
    let proj_k = region(g, params, &layout, MDTA_PROJECT_OUT, 0)?;

    let y = g.layer_norm(x, norm, T::from_f64(LN_EPS))?;
    let qkv = g.conv2d(y, qkv_k, 1, 0, 1)?;
    let qkv = g.conv2d(qkv, dw_k, 1, 1, 3 * c)?;
    let eps = T::from_f64(NORMALIZE_EPS);
    let split = |g: &mut Graph<T>, i: usize| -> Result<Var> {
        let part = g.narrow(qkv, 1, i * c, c)?;
        g.reshape(part, &[b * heads, hd, h * w])
    };
    let q = split(g, 0)?;
    let k = split(g, 1)?;
    let v = split(g, 2)?;
    let q = g.l2_normalize(q, eps)?;
    let k = g.l2_normalize(k, eps)?;
    let attn = g.matmul(q, k, true)?;
    let attn = g.reshape(attn, &[b, heads, hd * hd])?;
    let attn = g.scale_axis(attn, temp, 1)?;
    let attn = g.reshape(attn, &[b * heads, hd, hd])?;
    let attn = g.softmax(attn)?;
    let out = g.matmul(attn, v, false)?;
    let out = g.reshape(out, &[b, c, h, w])?;
    let out = g.conv2d(out, proj_k, 1, 0, 1)?;
    g.add(x, out)
}

/// Gated depthwise feed-forward network with residual.
///
/// `params` is the feed-forward half of the block layout, `[gdfn_len]`.
pub fn gdfn_forward<T: Scalar>(g: &mut Graph<T>, x: Var, params: Var, hyper: &BlockHyper) -> Result<Var> {
    let layout = ParamLayout::new(*hyper)?;
    check_input(g, x, hyper, "gdfn_forward")?;
    expect_len(g, params, layout.gdfn_len(), "gdfn_forward")?;
    let base = layout.mdta_len();
    let hid = hyper.hidden();

    let norm = region(g, params, &layout, GDFN_NORM, base)?;
    let in_k = region(g, params, &layout, GDFN_PROJECT_IN, base)?;
    let dw_k = region(g, params, &layout, GDFN_DWCONV, base)?;
    let out_k = region(g, params, &layout, GDFN_PROJECT_OUT, base)?;

    let y = g.layer_norm(x, norm, T::from_f64(LN_EPS))?;
    let y = g.conv2d(y, in_k, 1, 0, 1)?;
    let y = g.conv2d(y, dw_k, 1, 1, 2 * hid)?;
    let gate = g.narrow(y, 1, 0, hid)?;
    let value = g.narrow(y, 1, hid, hid)?;
    let gate = g.gelu(gate);
    let y = g.mul(gate, value)?;
    let y = g.conv2d(y, out_k, 1, 0, 1)?;
    g.add(x, y)
}

/// Full block `x' = GDFN(MDTA(x))` with every parameter taken from the flat `w`.
pub fn transformer_block_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, hyper: &BlockHyper) -> Result<Var> {
    let layout = ParamLayout::new(*hyper)?;
    expect_len(g, w, layout.len(), "transformer_block_forward")?;
    let attn_w = g.narrow(w, 0, 0, layout.mdta_len())?;
    let ffn_w = g.narrow(w, 0, layout.mdta_len(), layout.gdfn_len())?;
    let y = mdta_forward(g, x, attn_w, hyper)?;
    gdfn_forward(g, y, ffn_w, hyper)
}

/// Halves the resolution and doubles the width: pixel-unshuffle then a 1x1
/// conv from `4C` to `2C`. `kernel: [2C, 4C, 1, 1]`.
pub fn resample_down<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var) -> Result<Var> {
    let y = g.pixel_unshuffle(x, 2)?;
    g.conv2d(y, kernel, 1, 0, 1)
}

/// Doubles the resolution and halves the width: 1x1 conv from `C` to `2C`,
/// then pixel-shuffle. `kernel: [2C, C, 1, 1]`.
pub fn resample_up<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var) -> Result<Var> {
    let y = g.conv2d(x, kernel, 1, 0, 1)?;
    g.pixel_shuffle(y, 2)
}

/// Concatenates decoder and encoder features along channels and projects back
/// to the decoder width. `kernel: [Cd, Cd + Ce, 1, 1]`.
pub fn skip_fuse<T: Scalar>(g: &mut Graph<T>, decoder: Var, encoder: Var, kernel: Var) -> Result<Var> {
    let (sd, se) = (g.shape(decoder), g.shape(encoder));
    if sd.len() != 4 || se.len() != 4 || sd[0] != se[0] || sd[2..] != se[2..] {
        return Err(Error::shape(
            "skip_fuse",
            format!("decoder {sd:?} vs encoder {se:?}"),
        ));
    }
    let cat = g.concat(&[decoder, encoder], 1)?;
    g.conv2d(cat, kernel, 1, 0, 1)
}
