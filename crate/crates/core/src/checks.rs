//! Self-contained property suites: kernel-mixture distributivity, gradient
//! checks and mechanism invariants. Each check reports a name, a verdict and
//! the measured quantity.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{transformer_block_forward, BlockHyper, ParamLayout};
use crate::error::{Error, Result};
use crate::hair::{
    hsn_select, hypertrans_forward_selected, weightbox_mix, FcnnVars, HairModel, HyperTransBlock, ModelConfig,
};
use crate::params::Bound;
use crate::tensor::gradcheck::{finite_diff_check, finite_diff_check_all, sample_coords, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Distributivity,
    Gradients,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Distributivity, Suite::Gradients, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Self::Distributivity => "distributivity",
            Self::Gradients => "gradients",
            Self::Invariants => "invariants",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid("suite", format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Distributivity => distributivity_suite(seed)?,
        Suite::Gradients => gradient_suite(seed)?,
        Suite::Invariants => invariant_suite(seed)?,
    };
    Ok(SuiteReport { suite, checks })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Direct nested-loop convolution with zero padding and a single group.
pub fn conv2d_loop(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let (&[b, cin, h, w], &[cout, kc, kh, kw]) = (x.shape(), k.shape()) else {
        return Err(Error::shape("conv2d_loop", "expected rank-4 input and kernel"));
    };
    if kc != cin || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape("conv2d_loop", format!("{:?} with {:?}", x.shape(), k.shape())));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((n * cin + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * kd[((o * cin + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out)
}

/// Largest deviation, over `draws` random cases, between convolving with a
/// box-mixed kernel and mixing the per-row convolutions. Each deviation is
/// divided by `max|x| * max|K| * Cin * kh * kw`.
pub fn distributivity_deviation(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let n = rng.gen_range(1..=8);
        let (cin, cout) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let (h, w) = (rng.gen_range(4..=9), rng.gen_range(4..=9));
        let stride = rng.gen_range(1..=2);
        let pad = k / 2;
        let x_scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let x = uniform(&[1, cin, h, w], &mut rng).map(|v| v * x_scale);
        let kernel_len = cout * cin * k * k;
        let rows = uniform(&[n, kernel_len], &mut rng);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let vs = Tensor::from_parts(vec![n], logits.iter().map(|l| l.exp() / z).collect());

        let mut g = Graph::<f64>::new();
        let (xv, bv, vv) = (g.constant(x.clone()), g.constant(rows.clone()), g.constant(vs.clone()));
        let mixed = weightbox_mix(&mut g, vv, bv)?;
        let kernel = g.reshape(mixed, &[cout, cin, k, k])?;
        let lhs = g.conv2d(xv, kernel, stride, pad, 1)?;
        let lhs = g.value(lhs).clone();

        let mut rhs: Option<Tensor<f64>> = None;
        for i in 0..n {
            let row = Tensor::from_parts(vec![cout, cin, k, k], rows.data()[i * kernel_len..(i + 1) * kernel_len].to_vec());
            let y = conv2d_loop(&x, &row, stride, pad)?;
            let wi = vs.data()[i];
            rhs = Some(match rhs {
                None => y.map(|v| v * wi),
                Some(acc) => Tensor::from_parts(
                    acc.shape().to_vec(),
                    acc.data().iter().zip(y.data()).map(|(a, b)| a + wi * b).collect(),
                ),
            });
        }
        let rhs = rhs.expect("at least one row");
        let scale = x.max_abs() * rows.max_abs() * (cin * k * k) as f64;
        worst = worst.max(lhs.max_abs_diff(&rhs)? / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn distributivity_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // The library convolution must agree with the loop reference on its own.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut conv_err: f64 = 0.0;
    for _ in 0..20 {
        let (cin, cout, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4), [1, 3, 5][rng.gen_range(0..3)]);
        let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=k / 2));
        let x = uniform(&[2, cin, 7, 6], &mut rng);
        let kernel = uniform(&[cout, cin, k, k], &mut rng);
        let mut g = Graph::<f64>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kernel.clone()));
        let y = g.conv2d(xv, kv, stride, pad, 1)?;
        conv_err = conv_err.max(g.value(y).max_abs_diff(&conv2d_loop(&x, &kernel, stride, pad)?)?);
    }
    out.push(CheckOutcome::new("conv_matches_loop_reference", conv_err <= 1e-12, format!("max abs deviation {conv_err:.3e}")));

    let dev = distributivity_deviation(100, seed)?;
    out.push(CheckOutcome::new(
        "mixed_kernel_equals_mixed_outputs",
        dev <= 1e-10,
        format!("100 draws, max scaled deviation {dev:.3e} (tolerance 1e-10)"),
    ));
    Ok(out)
}

/// `sum(y * r)` for a fixed random `r`, so every output element contributes
/// a distinct weight to the gradient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(g.shape(y), &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Primitive = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3]], Box::new(|g, p| g.conv2d(p[0], p[1], 1, 1, 1))),
        ("conv2d_strided_depthwise", vec![vec![1, 4, 6, 6], vec![4, 1, 3, 3]], Box::new(|g, p| g.conv2d(p[0], p[1], 2, 1, 4))),
        ("linear", vec![vec![2, 3], vec![4, 3], vec![4]], Box::new(|g, p| g.linear(p[0], p[1], Some(p[2])))),
        ("matmul", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|g, p| g.matmul(p[0], p[1], false))),
        ("matmul_transposed", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|g, p| g.matmul(p[0], p[1], true))),
        ("layer_norm", vec![vec![1, 3, 2, 2], vec![3]], Box::new(|g, p| g.layer_norm(p[0], p[1], 1e-5))),
        ("gelu", vec![vec![12]], Box::new(|g, p| Ok(g.gelu(p[0])))),
        ("softmax", vec![vec![3, 4]], Box::new(|g, p| g.softmax(p[0]))),
        ("l2_normalize", vec![vec![2, 5]], Box::new(|g, p| g.l2_normalize(p[0], 1e-12))),
        ("pixel_shuffle", vec![vec![1, 8, 2, 3]], Box::new(|g, p| g.pixel_shuffle(p[0], 2))),
        ("pixel_unshuffle", vec![vec![1, 2, 4, 6]], Box::new(|g, p| g.pixel_unshuffle(p[0], 2))),
        ("pad_reflect", vec![vec![1, 2, 4, 5]], Box::new(|g, p| g.pad_reflect(p[0], 1, 3, 2, 0))),
        ("global_average_pool", vec![vec![2, 3, 3, 4]], Box::new(|g, p| g.global_average_pool(p[0]))),
        ("scale_axis", vec![vec![2, 3, 4], vec![3]], Box::new(|g, p| g.scale_axis(p[0], p[1], 1))),
        (
            "elementwise",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, p| {
                let a = g.add(p[0], p[1])?;
                let b = g.sub(p[0], p[1])?;
                let c = g.mul(a, b)?;
                Ok(g.scale(c, 0.7))
            }),
        ),
        (
            "reshape_concat_narrow_transpose",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|g, p| {
                let c = g.concat(&[p[0], p[1]], 1)?;
                let n = g.narrow(c, 1, 1, 3)?;
                let t = g.transpose(n)?;
                g.reshape(t, &[6])
            }),
        ),
        ("l1_loss", vec![vec![3, 4], vec![3, 4]], Box::new(|g, p| g.l1_loss(p[0], p[1]))),
        ("mean", vec![vec![5]], Box::new(|g, p| Ok(g.mean(p[0])))),
    ]
}

/// Central-difference check of every primitive at every coordinate.
pub fn primitive_gradient_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitives()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
            let probe_seed = seed.wrapping_add(i as u64);
            let report = finite_diff_check_all(
                |g, p| {
                    let y = f(g, p)?;
                    probe(g, y, probe_seed)
                },
                &params,
                GradCheckConfig::default(),
            )?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Toy network used by the end-to-end gradient check: width 4, one block per level.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        blocks: vec![1, 1, 1, 1],
        heads: vec![1, 1, 1, 1],
        box_sizes: vec![2, 2, 2, 2],
        ffn_expansion: 2.66,
        split: 3,
    }
}

/// Finite-difference check of the full network (DAC, selectors, weight
/// boxes, encoder and decoder convolutions) at `coords` sampled coordinates.
pub fn end_to_end_gradient_check(seed: u64, coords: usize) -> Result<GradCheckReport> {
    let model = HairModel::<f64>::new(gradient_check_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let x = uniform(&[1, 3, 16, 16], &mut rng).map(|v| 0.5 + 0.4 * v);
    let params: Vec<Tensor<f64>> = model.store().tensors().cloned().collect();
    let picks = sample_coords(&params, coords, seed);
    finite_diff_check(
        |g, p| {
            let bound = Bound::from_vars(p.to_vec());
            let xv = g.constant(x.clone());
            let out = model.forward(g, &bound, xv)?;
            // The input term carries no parameter gradient; probing the
            // correction alone keeps its rounding out of the differences.
            probe(g, out.residual, seed)
        },
        &params,
        &picks,
        GradCheckConfig::default(),
    )
}

fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, r) in primitive_gradient_checks(seed)? {
        out.push(CheckOutcome::new(
            &format!("grad_{name}"),
            r.passed(),
            format!("{} coords, max rel err {:.2e}", r.checked(), r.max_rel_err),
        ));
    }
    let r = end_to_end_gradient_check(seed, 500)?;
    out.push(CheckOutcome::new(
        "grad_end_to_end_model",
        r.passed() && r.checked() >= 500,
        format!(
            "{} coords, max rel err {:.2e}, {} failing",
            r.checked(),
            r.max_rel_err,
            r.failures().count()
        ),
    ));
    Ok(out)
}

/// Random GIVs pushed through random selectors with logits up to about 1e4.
pub fn simplex_violations(draws: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..draws {
        let (len, n) = (2 * rng.gen_range(1..=8), rng.gen_range(1..=8));
        let scale = 10f64.powf(rng.gen_range(-2.0..4.0)) / len as f64;
        let giv = uniform(&[len], &mut rng);
        let weight = uniform(&[n, len], &mut rng).map(|v| v * scale);
        let bias = uniform(&[n], &mut rng).map(|v| v * scale);
        let mut g = Graph::<f64>::new();
        let fcnn = FcnnVars {
            weight: g.constant(weight),
            bias: g.constant(bias),
        };
        let giv = g.constant(giv);
        let vs = hsn_select(&mut g, giv, fcnn)?;
        let v = g.value(vs).data();
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn invariant_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bad = simplex_violations(10_000, seed)?;
    out.push(CheckOutcome::new("selector_simplex", bad == 0, format!("{bad} of 10000 draws violate the simplex")));

    // N = 1: the selector returns exactly 1 and the mix is the single row.
    let hyper = BlockHyper::new(4, 1, 2.0)?;
    let layout = ParamLayout::new(hyper)?;
    let row = uniform(&[1, layout.len()], &mut rng);
    let mut g = Graph::<f64>::new();
    let fcnn = FcnnVars {
        weight: g.constant(uniform(&[1, 8], &mut rng)),
        bias: g.constant(uniform(&[1], &mut rng)),
    };
    let giv = g.constant(uniform(&[8], &mut rng));
    let vs = hsn_select(&mut g, giv, fcnn)?;
    let bv = g.constant(row.clone());
    let mixed = weightbox_mix(&mut g, vs, bv)?;
    let single = g.value(vs).data() == [1.0] && g.value(mixed).data() == row.data();
    out.push(CheckOutcome::new("single_row_box_is_fixed", single, "selector 1.0, mixed weights equal the row"));

    // One-hot selection reproduces the selected row's block exactly.
    let n = 3;
    let rows = uniform(&[n, layout.len()], &mut rng).map(|v| 0.3 * v);
    let x = uniform(&[1, 4, 6, 6], &mut rng);
    let mut one_hot_ok = true;
    for i in 0..n {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let mut onehot = vec![0.0; n];
        onehot[i] = 1.0;
        let vs = g.constant(Tensor::from_parts(vec![n], onehot));
        let block = HyperTransBlock {
            fcnn: FcnnVars {
                weight: g.constant(Tensor::zeros(&[n, 8])),
                bias: g.constant(Tensor::zeros(&[n])),
            },
            weight_box: g.constant(rows.clone()),
            hyper,
        };
        let y = hypertrans_forward_selected(&mut g, xv, vs, &block)?;
        let w = g.constant(Tensor::from_parts(vec![layout.len()], rows.data()[i * layout.len()..(i + 1) * layout.len()].to_vec()));
        let z = transformer_block_forward(&mut g, xv, w, &hyper)?;
        one_hot_ok &= g.value(y).data() == g.value(z).data();
    }
    out.push(CheckOutcome::new("one_hot_selects_row", one_hot_ok, "bitwise equal to the plain block"));

    out.extend(sharing_checks(seed)?);
    out.extend(structure_checks(seed)?);
    Ok(out)
}

/// Box sharing within a stage and per-block selector locality.
fn sharing_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let cfg = ModelConfig {
        blocks: vec![1, 1, 2, 2],
        ..ModelConfig::toy()
    };
    let mut model = HairModel::<f64>::new(cfg, seed)?;
    let ids = model.hyper_blocks();
    let handles = |m: &HairModel<f64>, g: &mut Graph<f64>| -> Result<(Bound, Vec<HyperTransBlock>)> {
        let bound = m.bind(g, false);
        let hs = ids.iter().map(|&id| m.hyper_block(&bound, id)).collect::<Result<_>>()?;
        Ok((bound, hs))
    };
    let mut g = Graph::new();
    let (_, hs) = handles(&model, &mut g)?;
    let mut shared = true;
    for (a, ha) in ids.iter().zip(&hs) {
        for (b, hb) in ids.iter().zip(&hs) {
            let same_stage = a.stage == b.stage;
            shared &= (ha.weight_box == hb.weight_box) == same_stage;
            if a != b {
                shared &= ha.fcnn.weight != hb.fcnn.weight && ha.fcnn.bias != hb.fcnn.bias;
            }
        }
    }
    let mut out = vec![CheckOutcome::new(
        "box_shared_within_stage",
        shared && ids.len() >= 3,
        format!("{} hyper blocks", ids.len()),
    )];

    let giv_len = model.config().giv_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ca1);
    let giv = uniform(&[giv_len], &mut rng);
    let vectors = |m: &HairModel<f64>| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let gv = g.constant(giv.clone());
        let vs = m.selecting_vectors(&mut g, &bound, gv)?;
        Ok(vs.iter().map(|&v| g.value(v).data().to_vec()).collect())
    };
    let before = vectors(&model)?;
    let target = 1;
    let name = format!("{}.fcnn.weight", model.block_name(ids[target]));
    let w = model
        .store_mut()
        .get_mut(&name)
        .ok_or_else(|| Error::MissingTensor(name.clone()))?;
    for v in w.data_mut() {
        *v += 0.5;
    }
    w.data_mut()[0] += 1.0;
    let after = vectors(&model)?;
    let local = (0..ids.len()).all(|i| (before[i] == after[i]) == (i != target));
    out.push(CheckOutcome::new("selector_mutation_is_local", local, format!("perturbed {name}")));
    Ok(out)
}

/// GIV length, shape preservation, residual identities and layout round trips.
fn structure_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57);
    let cfg = ModelConfig::toy();
    let mut model = HairModel::<f64>::new(cfg.clone(), seed)?;

    let mut giv_ok = true;
    let mut shape_ok = true;
    for (b, h, w) in [(1, 16, 16), (2, 24, 40), (1, 17, 23)] {
        let x = uniform(&[b, 3, h, w], &mut rng).map(|v| 0.5 + 0.5 * v);
        let (y, giv) = model.infer(&x)?;
        shape_ok &= y.shape() == x.shape();
        giv_ok &= giv.is_some_and(|g| g.shape() == [b, 2 * cfg.base_channels]);
    }
    out.push(CheckOutcome::new("giv_length_is_2c", giv_ok, "inputs 16x16, 24x40, 17x23"));
    out.push(CheckOutcome::new("forward_preserves_shape", shape_ok, "[B, 3, H, W] in and out"));

    let zero = Tensor::zeros(model.store().get("out.conv").expect("out conv").shape());
    model.store_mut().set("out.conv", zero)?;
    let x = uniform(&[1, 3, 19, 21], &mut rng);
    let identity = model.restore(&x)?.data() == x.data();
    out.push(CheckOutcome::new("zero_output_conv_is_identity", identity, "restored equals input bitwise"));

    let hyper = BlockHyper::new(8, 2, 2.66)?;
    let layout = ParamLayout::new(hyper)?;
    let mut g = Graph::<f64>::new();
    let xb = uniform(&[1, 8, 5, 7], &mut rng);
    let xv = g.constant(xb.clone());
    let w = g.constant(Tensor::zeros(&[layout.len()]));
    let y = transformer_block_forward(&mut g, xv, w, &hyper)?;
    out.push(CheckOutcome::new("zero_block_is_identity", g.value(y).data() == xb.data(), "zero parameters"));

    let flat: Vec<f64> = layout.init(&mut rng);
    let back = layout.flatten(&layout.unflatten(&flat)?)?;
    out.push(CheckOutcome::new("layout_round_trip", back == flat, format!("{} values", flat.len())));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop_conv_hand_value() {
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
        assert_eq!(conv2d_loop(&x, &k, 1, 0).unwrap().data(), [2.0, 4.0, 6.0, 8.0]);
        let ones = Tensor::from_f64(&[1, 1, 3, 3], &[1.0; 9]).unwrap();
        // zero padding: each output sums the in-range neighbourhood
        assert_eq!(conv2d_loop(&x, &ones, 1, 1).unwrap().data(), [10.0; 4]);
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn distributivity_suite_passes() {
        let r = run_suite(Suite::Distributivity, 0).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn invariant_suite_passes() {
        let r = run_suite(Suite::Invariants, 0).unwrap();
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn primitive_gradients_pass() {
        for (name, r) in primitive_gradient_checks(3).unwrap() {
            assert!(r.passed(), "{name}: {:?}", r.failures().next());
        }
    }
}
