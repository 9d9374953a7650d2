//! Image quality metrics and GIV separability diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", format!("peak {peak} must be positive")));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let mse = sse / a.numel().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// `inf` for the infinite marker, fixed precision otherwise.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimValue {
    pub value: f64,
    /// The image was smaller than the window and global statistics were used.
    pub global_fallback: bool,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

fn ssim_formula(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Separable valid-mode filtering of an `h x w` plane with the Gaussian window.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of `[C, H, W]` images with dynamic range 1, averaged over channels.
pub fn ssim_detailed<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<SsimValue> {
    if a.shape() != b.shape() || a.shape().len() != 3 || a.numel() == 0 {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}, expected equal [C, H, W]", a.shape(), b.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let to64 = |t: &Tensor<T>| t.data().iter().map(|&v| v.as_f64()).collect::<Vec<f64>>();
    let (da, db) = (to64(a), to64(b));
    let global_fallback = h < SSIM_WINDOW || w < SSIM_WINDOW;
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &da[ch * h * w..(ch + 1) * h * w];
        let pb = &db[ch * h * w..(ch + 1) * h * w];
        if global_fallback {
            let n = pa.len() as f64;
            let (ma, mb) = (pa.iter().sum::<f64>() / n, pb.iter().sum::<f64>() / n);
            let va = pa.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
            let vb = pb.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
            let cov = pa.iter().zip(pb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            total += ssim_formula(ma, mb, va, vb, cov);
            continue;
        }
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &win);
        let mu_b = filter_valid(pb, h, w, &win);
        let aa = filter_valid(&sq(pa, pa), h, w, &win);
        let bb = filter_valid(&sq(pb, pb), h, w, &win);
        let ab = filter_valid(&sq(pa, pb), h, w, &win);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            sum += ssim_formula(ma, mb, aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(SsimValue {
        value: total / c as f64,
        global_fallback,
    })
}

pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(ssim_detailed(a, b)?.value)
}

/// Mean PSNR/SSIM for one degradation label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMetrics {
    pub label: String,
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Accumulates per-label metrics, keeping labels in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    order: Vec<String>,
    sums: BTreeMap<String, (usize, f64, f64)>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, psnr: f64, ssim: f64) {
        let entry = self.sums.entry(label.to_string()).or_insert_with(|| {
            self.order.push(label.to_string());
            (0, 0.0, 0.0)
        });
        entry.0 += 1;
        entry.1 += psnr;
        entry.2 += ssim;
    }

    pub fn rows(&self) -> Vec<LabelMetrics> {
        self.order
            .iter()
            .map(|l| {
                let (n, p, s) = self.sums[l];
                LabelMetrics {
                    label: l.clone(),
                    n,
                    psnr: p / n as f64,
                    ssim: s / n as f64,
                }
            })
            .collect()
    }

    pub fn get(&self, label: &str) -> Option<LabelMetrics> {
        self.rows().into_iter().find(|r| r.label == label)
    }

    /// Unweighted mean of the per-label PSNR means.
    pub fn mean_psnr(&self) -> f64 {
        let rows = self.rows();
        rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len().max(1) as f64
    }

    /// `label,n,psnr,ssim`, followed by any diagnostic notes as `#` comments.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,n,psnr,ssim\n");
        for r in self.rows() {
            let _ = writeln!(out, "{},{},{},{:.6}", r.label, r.n, format_db(r.psnr), r.ssim);
        }
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out
    }
}

/// Per-label centroids and nearest-centroid predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidReport {
    pub accuracy: f64,
    pub labels: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    pub predictions: Vec<String>,
}

/// Classifies `heldout` by Euclidean distance to the per-label means of
/// `train`. Labels are ordered by first appearance; ties go to the earlier one.
pub fn giv_centroid_classify(train: &[(Vec<f64>, String)], heldout: &[(Vec<f64>, String)]) -> Result<CentroidReport> {
    let dim = train
        .first()
        .map(|(v, _)| v.len())
        .ok_or_else(|| Error::invalid("giv_centroid_classify", "no training vectors"))?;
    if let Some((v, _)) = train.iter().chain(heldout).find(|(v, _)| v.len() != dim) {
        return Err(Error::shape("giv_centroid_classify", format!("vector of length {} among length {dim}", v.len())));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (v, l) in train {
        let i = labels.iter().position(|x| x == l).unwrap_or_else(|| {
            labels.push(l.clone());
            sums.push((vec![0.0; dim], 0));
            labels.len() - 1
        });
        for (s, x) in sums[i].0.iter_mut().zip(v) {
            *s += x;
        }
        sums[i].1 += 1;
    }
    if let Some((_, l)) = heldout.iter().find(|(_, l)| !labels.contains(l)) {
        return Err(Error::invalid("giv_centroid_classify", format!("label {l:?} has no training vectors")));
    }
    let centroids: Vec<Vec<f64>> = sums.into_iter().map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect()).collect();
    let mut correct = 0;
    let predictions: Vec<String> = heldout
        .iter()
        .map(|(v, l)| {
            let mut best = (f64::INFINITY, 0);
            for (i, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            if &labels[best.1] == l {
                correct += 1;
            }
            labels[best.1].clone()
        })
        .collect();
    Ok(CentroidReport {
        accuracy: if heldout.is_empty() { 0.0 } else { correct as f64 / heldout.len() as f64 },
        labels,
        centroids,
        predictions,
    })
}

/// `|composite - (a + b) / 2| / |a - b|`: 0 at the midpoint, 0.5 at either end.
pub fn giv_midpoint_diagnostic(a: &[f64], b: &[f64], composite: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != composite.len() {
        return Err(Error::shape(
            "giv_midpoint_diagnostic",
            format!("lengths {}, {}, {}", a.len(), b.len(), composite.len()),
        ));
    }
    let span: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    if span == 0.0 {
        return Err(Error::invalid("giv_midpoint_diagnostic", "the two centroids coincide"));
    }
    let off: f64 = composite
        .iter()
        .zip(a.iter().zip(b))
        .map(|(c, (x, y))| (c - 0.5 * (x + y)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(off / span)
}

/// Midpoint ratio of every two-part composite label (`a+b`) whose parts
/// also appear on their own, computed on per-label GIV centroids.
pub fn composite_midpoints(givs: &[(Vec<f64>, String)]) -> Result<Vec<(String, f64)>> {
    let mut sums: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for (v, label) in givs {
        let e = sums.entry(label).or_insert_with(|| (0, vec![0.0; v.len()]));
        if e.1.len() != v.len() {
            return Err(Error::shape("composite_midpoints", format!("GIV lengths {} and {}", e.1.len(), v.len())));
        }
        e.0 += 1;
        e.1.iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    let centroid = |label: &str| sums.get(label).map(|(n, s)| s.iter().map(|x| x / *n as f64).collect::<Vec<_>>());
    let mut out = Vec::new();
    for label in sums.keys() {
        let Some((a, b)) = label.split_once('+').filter(|(_, b)| !b.contains('+')) else {
            continue;
        };
        if let (Some(ca), Some(cb), Some(cc)) = (centroid(a), centroid(b), centroid(label)) {
            out.push((label.to_string(), giv_midpoint_diagnostic(&ca, &cb, &cc)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = random(&[3, 8, 8], 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        let z = full(&[3, 4, 4], 0.0);
        let o = full(&[3, 4, 4], 1.0);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        let b = full(&[3, 4, 4], 100.0);
        let c = full(&[3, 4, 4], 100.5);
        let v = psnr(&b, &c, 255.0).unwrap();
        assert!((v - 54.1514).abs() < 0.01, "{v}");
        assert!(psnr(&a, &z, 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[3, 16, 16], 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let v = ssim(&full(&[3, 16, 16], 0.5), &full(&[3, 16, 16], 0.25)).unwrap();
        assert!((v - 0.8001).abs() < 0.0005, "{v}");
        let b = random(&[3, 16, 16], 3);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = ssim_detailed(&random(&[3, 8, 8], 4), &random(&[3, 8, 8], 5)).unwrap();
        assert!(small.global_fallback);
        assert!(!ssim_detailed(&a, &b).unwrap().global_fallback);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let clean = crate::degrade::gen_clean(1, 32, 32).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [5.0, 15.0, 25.0, 50.0] {
            let noisy = crate::degrade::add_gaussian_noise(&clean, sigma, 3).unwrap();
            let p = psnr(&clean, &noisy, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_csv() {
        let mut r = MetricsReport::new();
        r.add("noise", 30.0, 0.9);
        r.add("haze", f64::INFINITY, 1.0);
        r.add("noise", 32.0, 0.8);
        assert_eq!(r.to_csv(), "label,n,psnr,ssim\nnoise,2,31.0000,0.850000\nhaze,1,inf,1.000000\n");
    }

    fn labelled(points: &[(f64, &str)], dim: usize) -> Vec<(Vec<f64>, String)> {
        points.iter().map(|&(v, l)| (vec![v; dim], l.to_string())).collect()
    }

    #[test]
    fn centroid_cases() {
        let train = labelled(&[(0.0, "a"), (10.0, "b")], 4);
        let held = labelled(&[(0.5, "a"), (9.0, "b"), (-1.0, "a")], 4);
        let r = giv_centroid_classify(&train, &held).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.labels, ["a", "b"]);

        let same = labelled(&[(1.0, "x"), (1.0, "y"), (1.0, "z")], 3);
        let r = giv_centroid_classify(&same, &same).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.predictions.iter().all(|p| p == "x"));

        assert!(giv_centroid_classify(&[], &held).is_err());
        assert!(giv_centroid_classify(&train, &labelled(&[(1.0, "c")], 4)).is_err());
    }

    #[test]
    fn gaussian_clusters_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centres = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 5.0]];
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Vec<f64>, String)> {
            (0..n)
                .map(|i| {
                    let k = i % 3;
                    (centres[k].iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect(), format!("l{k}"))
                })
                .collect()
        };
        let train = draw(&mut rng, 30);
        let held = draw(&mut rng, 100);
        assert_eq!(giv_centroid_classify(&train, &held).unwrap().accuracy, 1.0);
    }

    #[test]
    fn composite_midpoints_use_centroids() {
        let g = |v: [f64; 2], l: &str| (v.to_vec(), l.to_string());
        let givs = [
            g([0.0, 0.0], "noise"),
            g([2.0, 0.0], "noise"),
            g([1.0, 4.0], "haze"),
            g([1.0, 2.0], "noise+haze"),
            g([9.0, 9.0], "rain+haze"),
        ];
        let r = composite_midpoints(&givs).unwrap();
        assert_eq!(r, vec![("noise+haze".to_string(), 0.0)]);
    }

    #[test]
    fn midpoint_cases() {
        let a = [0.0, 2.0];
        let b = [2.0, 0.0];
        assert_eq!(giv_midpoint_diagnostic(&a, &b, &[1.0, 1.0]).unwrap(), 0.0);
        assert!((giv_midpoint_diagnostic(&a, &b, &a).unwrap() - 0.5).abs() < 1e-15);
        assert!(giv_midpoint_diagnostic(&a, &a, &b).is_err());
    }

    proptest! {
        #[test]
        fn centroid_affine_invariance(seed in any::<u64>(), alpha in 0.1f64..10.0, beta in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| -> Vec<(Vec<f64>, String)> {
                (0..n).map(|i| ((0..4).map(|_| rng.gen_range(-1.0..1.0) + (i % 3) as f64).collect(), format!("l{}", i % 3))).collect()
            };
            let train = draw(12);
            let held = draw(20);
            let map = |s: &[(Vec<f64>, String)]| -> Vec<(Vec<f64>, String)> {
                s.iter().map(|(v, l)| (v.iter().map(|x| alpha * x + beta).collect(), l.clone())).collect()
            };
            let r1 = giv_centroid_classify(&train, &held).unwrap();
            let r2 = giv_centroid_classify(&map(&train), &map(&held)).unwrap();
            prop_assert_eq!(r1.predictions, r2.predictions);
        }

        #[test]
        fn ssim_global_fallback_permutation_invariant(seed in any::<u64>()) {
            let a = random(&[3, 6, 6], seed);
            let b = random(&[3, 6, 6], seed ^ 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..36).collect();
            for i in (1..36).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permute = |t: &Tensor<f64>| {
                let d = t.data();
                let out = (0..3).flat_map(|c| perm.iter().map(move |&p| d[c * 36 + p])).collect();
                Tensor::new(vec![3, 6, 6], out).unwrap()
            };
            let v1 = ssim(&a, &b).unwrap();
            let v2 = ssim(&permute(&a), &permute(&b)).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&v1));
        }
    }
}
