#![allow(dead_code)]

use alps_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, uniform_vec(rng, n, -1.0, 1.0)).unwrap()
}

/// `||a - b|| / max(||a||, ||b||, 1e-12)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central finite differences of a scalar function of several tensors,
/// with respect to tensor `which`.
pub fn numeric_grad(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    eps: f64,
) -> Vec<f64> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[which].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Direct convolution: four nested loops over output, filter, channel and
/// kernel offsets.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = b[fi];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((fi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// Transposed convolution by scattering every input pixel through the
/// kernel: the adjoint of `naive_conv2d`.
pub fn naive_conv_transpose2d(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for p in 0..oh * ow {
                out[(ni * f + fi) * oh * ow + p] = b[fi];
            }
        }
        for ci in 0..c {
            for y in 0..h {
                for xi in 0..w {
                    let v = x.data()[((ni * c + ci) * h + y) * w + xi];
                    for fi in 0..f {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (xi * stride + j) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    out[((ni * f + fi) * oh + oy as usize) * ow + ox as usize] +=
                                        v * k.data()[((ci * f + fi) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// AUROC by enumerating every (anomaly, normal) pair, as the exact fraction
/// `(2 * wins + ties) / (2 * P * N)`.
pub fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    (twice, 2 * pairs)
}

/// Equal error rate from a sweep over `steps + 1` evenly spaced thresholds
/// offset half a step below each grid point of `[0, 1]`, flagging
/// `score >= t`, with linear interpolation at the first sign change of
/// `FPR - FNR`.
pub fn dense_sweep_eer(scores: &[f64], labels: &[u8], steps: usize) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rates = |t: f64| {
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if l == 0 && s >= t {
                fp += 1.0;
            }
            if l == 1 && s < t {
                fn_ += 1.0;
            }
        }
        (fp / neg, fn_ / pos)
    };
    let half = 0.5 / steps as f64;
    let mut prev = rates(-half);
    for i in 1..=steps + 1 {
        let t = if i == steps + 1 { f64::INFINITY } else { i as f64 / steps as f64 - half };
        let cur = rates(t);
        let (da, db) = (prev.0 - prev.1, cur.0 - cur.1);
        if da == 0.0 {
            return prev.0;
        }
        if da > 0.0 && db <= 0.0 {
            return prev.0 + da / (da - db) * (cur.0 - prev.0);
        }
        prev = cur;
    }
    prev.0
}

/// Area under the ROC curve by sorting scores descending and integrating
/// TPR over FPR with trapezoids; tie-free input assumed.
pub fn trapezoid_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let (mut tpr, mut fpr) = (0.0, 0.0);
    for i in idx {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let (t, f) = (tp / pos, fp / neg);
        area += (f - fpr) * (t + tpr) / 2.0;
        (tpr, fpr) = (t, f);
    }
    area
}

/// Random labeled scores on the grid `k / 1000`, both classes present.
pub fn grid_scores(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..1000) as f64 / 1000.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Gradient of `mse(build(inputs), target)` by backprop and by central
/// differences for every input; returns the worst relative error.
pub fn check(inputs: &[Tensor<f64>], build: &Build, target_seed: u64) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.shape(y).to_vec()
    };
    let target = random_tensor(&mut rng(target_seed), &out_shape);
    let loss = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars);
        let tv = g.constant(target.clone());
        let l = g.mse_loss(y, tv).unwrap();
        g.item(l)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let y = build(&mut g, &vars);
    let tv = g.constant(target.clone());
    let l = g.mse_loss(y, tv).unwrap();
    g.backward(l).unwrap();
    (0..inputs.len())
        .map(|i| rel_err(g.grad(vars[i]).unwrap(), &numeric_grad(&loss, inputs, i, 1e-4)))
        .fold(0.0, f64::max)
}
