//! Block, classifier and selector forwards checked against plain nested-loop
//! implementations written independently of the graph kernels.

use hair::arch::{
    gdfn_forward, mdta_forward, transformer_block_forward, BlockHyper, ParamLayout, GDFN_DWCONV, GDFN_NORM,
    GDFN_PROJECT_IN, GDFN_PROJECT_OUT, MDTA_NORM, MDTA_PROJECT_OUT, MDTA_QKV, MDTA_QKV_DW, MDTA_TEMPERATURE,
};
use hair::hair::{dac_forward, hypertrans_forward, DacParams, FcnnVars, HyperTransBlock};
use hair::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `[C, H, W]` feature map of a single image.
#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, val: f64) {
        self.v[(c * self.h + y) * self.w + x] = val;
    }

    fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        assert_eq!(s[0], 1);
        Self { c: s[1], h: s[2], w: s[3], v: t.data().to_vec() }
    }

    fn add(&self, o: &Map) -> Map {
        let mut r = self.clone();
        r.v.iter_mut().zip(&o.v).for_each(|(a, b)| *a += b);
        r
    }
}

/// Zero-padded grouped convolution, kernel `[cout, cin/groups, k, k]` given flat.
fn conv(x: &Map, kernel: &[f64], cout: usize, k: usize, stride: usize, pad: usize, groups: usize) -> Map {
    let cin_g = x.c / groups;
    let cout_g = cout / groups;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(cout, oh, ow);
    for o in 0..cout {
        let grp = o / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = kernel[((o * cin_g + ci) * k + ky) * k + kx];
                            acc += wv * x.at(grp * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

/// Channel-wise layer norm at every pixel, scale only.
fn layer_norm(x: &Map, scale: &[f64]) -> Map {
    let mut out = Map::zeros(x.c, x.h, x.w);
    for y in 0..x.h {
        for xx in 0..x.w {
            let mean = (0..x.c).map(|c| x.at(c, y, xx)).sum::<f64>() / x.c as f64;
            let var = (0..x.c).map(|c| (x.at(c, y, xx) - mean).powi(2)).sum::<f64>() / x.c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for c in 0..x.c {
                out.set(c, y, xx, (x.at(c, y, xx) - mean) * inv * scale[c]);
            }
        }
    }
    out
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

struct Regions<'a> {
    layout: &'a ParamLayout,
    w: &'a [f64],
}

impl Regions<'_> {
    fn get(&self, name: &str) -> &[f64] {
        &self.w[self.layout.entry(name).unwrap().range()]
    }
}

fn mdta(x: &Map, r: &Regions, heads: usize) -> Map {
    let c = x.c;
    let hd = c / heads;
    let n = x.h * x.w;
    let y = layer_norm(x, r.get(MDTA_NORM));
    let qkv = conv(&y, r.get(MDTA_QKV), 3 * c, 1, 1, 0, 1);
    let qkv = conv(&qkv, r.get(MDTA_QKV_DW), 3 * c, 3, 1, 1, 3 * c);
    let row = |ch: usize| -> Vec<f64> { qkv.v[ch * n..(ch + 1) * n].to_vec() };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|a| a / norm).collect()
    };
    let temp = r.get(MDTA_TEMPERATURE);
    let mut attended = Map::zeros(c, x.h, x.w);
    for head in 0..heads {
        let q: Vec<Vec<f64>> = (0..hd).map(|i| unit(row(head * hd + i))).collect();
        let k: Vec<Vec<f64>> = (0..hd).map(|i| unit(row(c + head * hd + i))).collect();
        let v: Vec<Vec<f64>> = (0..hd).map(|i| row(2 * c + head * hd + i)).collect();
        for i in 0..hd {
            let logits: Vec<f64> = (0..hd)
                .map(|j| temp[head] * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for p in 0..n {
                let val: f64 = (0..hd).map(|j| e[j] / z * v[j][p]).sum();
                attended.v[(head * hd + i) * n + p] = val;
            }
        }
    }
    x.add(&conv(&attended, r.get(MDTA_PROJECT_OUT), c, 1, 1, 0, 1))
}

fn gdfn(x: &Map, r: &Regions, hidden: usize) -> Map {
    let y = layer_norm(x, r.get(GDFN_NORM));
    let y = conv(&y, r.get(GDFN_PROJECT_IN), 2 * hidden, 1, 1, 0, 1);
    let y = conv(&y, r.get(GDFN_DWCONV), 2 * hidden, 3, 1, 1, 2 * hidden);
    let n = x.h * x.w;
    let mut gated = Map::zeros(hidden, x.h, x.w);
    for i in 0..hidden * n {
        gated.v[i] = gelu(y.v[i]) * y.v[hidden * n + i];
    }
    x.add(&conv(&gated, r.get(GDFN_PROJECT_OUT), x.c, 1, 1, 0, 1))
}

fn block(x: &Map, layout: &ParamLayout, w: &[f64]) -> Map {
    let hyper = layout.hyper();
    let r = Regions { layout, w };
    gdfn(&mdta(x, &r, hyper.heads), &r, hyper.hidden())
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_block(c: usize, heads: usize, seed: u64) -> (ParamLayout, Vec<f64>, Tensor<f64>) {
    let hyper = BlockHyper::new(c, heads, 2.66).unwrap();
    let layout = ParamLayout::new(hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(layout.len(), -1.0, 1.0, &mut rng);
    let x = Tensor::new(vec![1, c, 8, 8], uniform(c * 64, -2.0, 2.0, &mut rng)).unwrap();
    (layout, w, x)
}

#[test]
fn attention_matches_loop_reference() {
    for (heads, seed) in [(1, 1), (2, 2), (4, 3)] {
        let (layout, w, x) = random_block(8, heads, seed);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(Tensor::new(vec![layout.mdta_len()], w[..layout.mdta_len()].to_vec()).unwrap());
        let y = mdta_forward(&mut g, xv, wv, &layout.hyper()).unwrap();
        let reference = mdta(&Map::from_tensor(&x), &Regions { layout: &layout, w: &w }, heads);
        let dev = max_abs_diff(g.value(y).data(), &reference.v);
        assert!(dev <= 1e-10, "heads {heads}: deviation {dev:e}");
    }
}

#[test]
fn feed_forward_matches_loop_reference() {
    for seed in [4, 5] {
        let (layout, w, x) = random_block(8, 2, seed);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(Tensor::new(vec![layout.gdfn_len()], w[layout.mdta_len()..].to_vec()).unwrap());
        let y = gdfn_forward(&mut g, xv, wv, &layout.hyper()).unwrap();
        let hidden = layout.hyper().hidden();
        let reference = gdfn(&Map::from_tensor(&x), &Regions { layout: &layout, w: &w }, hidden);
        let dev = max_abs_diff(g.value(y).data(), &reference.v);
        assert!(dev <= 1e-10, "deviation {dev:e}");
    }
}

#[test]
fn full_block_matches_loop_reference() {
    let (layout, w, x) = random_block(8, 2, 6);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::new(vec![layout.len()], w.clone()).unwrap());
    let y = transformer_block_forward(&mut g, xv, wv, &layout.hyper()).unwrap();
    let reference = block(&Map::from_tensor(&x), &layout, &w);
    let dev = max_abs_diff(g.value(y).data(), &reference.v);
    assert!(dev <= 1e-10, "deviation {dev:e}");
}

#[test]
fn classifier_is_residual_stages_then_pooling() {
    let (cin, base) = (16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dac = DacParams::<f64>::init(cin, base, &mut rng);
    let x = Tensor::new(vec![1, cin, 16, 16], uniform(cin * 256, -1.0, 1.0, &mut rng)).unwrap();

    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let vars = dac.bind(&mut g, false);
    let giv = dac_forward(&mut g, xv, &vars).unwrap();

    let mut f = Map::from_tensor(&x);
    for s in &dac.stages {
        let width = s.conv1.shape()[0];
        let mut y = conv(&f, s.conv1.data(), width, 3, 1, 1, 1);
        y.v.iter_mut().for_each(|v| *v = gelu(*v));
        let y = conv(&y, s.conv2.data(), width, 3, 1, 1, 1);
        f = conv(&f.add(&y), s.down.data(), s.down.shape()[0], 3, 2, 1, 1);
    }
    assert_eq!(f.c, 2 * base);
    let n = (f.h * f.w) as f64;
    let pooled: Vec<f64> = (0..f.c).map(|c| f.v[c * f.h * f.w..(c + 1) * f.h * f.w].iter().sum::<f64>() / n).collect();
    assert_eq!(g.shape(giv), &[1, 2 * base]);
    let dev = max_abs_diff(g.value(giv).data(), &pooled);
    assert!(dev <= 1e-10, "deviation {dev:e}");
}

#[test]
fn hyper_block_runs_the_softmax_mixture_of_rows() {
    let (c, heads, rows, giv_len) = (4, 2, 3, 6);
    let hyper = BlockHyper::new(c, heads, 2.66).unwrap();
    let layout = ParamLayout::new(hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let box_rows = uniform(rows * layout.len(), -1.0, 1.0, &mut rng);
    let weight = uniform(rows * giv_len, -1.0, 1.0, &mut rng);
    let bias = uniform(rows, -1.0, 1.0, &mut rng);
    let giv = uniform(giv_len, -1.0, 1.0, &mut rng);
    let x = Tensor::new(vec![1, c, 8, 8], uniform(c * 64, -1.0, 1.0, &mut rng)).unwrap();

    let mut g = Graph::<f64>::new();
    let block_vars = HyperTransBlock {
        fcnn: FcnnVars {
            weight: g.constant(Tensor::new(vec![rows, giv_len], weight.clone()).unwrap()),
            bias: g.constant(Tensor::new(vec![rows], bias.clone()).unwrap()),
        },
        weight_box: g.constant(Tensor::new(vec![rows, layout.len()], box_rows.clone()).unwrap()),
        hyper,
    };
    let xv = g.constant(x.clone());
    let gv = g.constant(Tensor::new(vec![giv_len], giv.clone()).unwrap());
    let y = hypertrans_forward(&mut g, xv, gv, &block_vars).unwrap();

    let logits: Vec<f64> = (0..rows)
        .map(|r| bias[r] + (0..giv_len).map(|j| weight[r * giv_len + j] * giv[j]).sum::<f64>())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mixed: Vec<f64> = (0..layout.len())
        .map(|p| (0..rows).map(|r| e[r] / z * box_rows[r * layout.len() + p]).sum())
        .collect();
    let reference = block(&Map::from_tensor(&x), &layout, &mixed);
    let dev = max_abs_diff(g.value(y).data(), &reference.v);
    assert!(dev <= 1e-10, "deviation {dev:e}");
}
