//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod gradients;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use reprime::model::{Model, ModelSpec};
use reprime::surgery::LayerGroup;
use reprime::{Result, Tape, Tensor, TensorMap, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn unit(t: &Tensor) -> Tensor {
    let n = t.norm();
    if n > 0.0 {
        t.scale(1.0 / n)
    } else {
        t.clone()
    }
}

const MAX_HALVINGS: usize = 6;

/// Directional finite-difference check of `f` with respect to each input.
///
/// The direction for each input is its analytic gradient tilted by a random
/// unit vector (weight 0.3), so the projected derivative is large relative to
/// f32 round-off while still probing off-gradient components. Returns
/// the relative error `|fd - analytic| / max(|fd|, |analytic|)` per input,
/// or 0 for inputs whose gradient vanishes in both estimates.
pub fn grad_check(inputs: &[Tensor], h: f32, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let pattern = tape.branch_pattern();
    let eval = |xs: &[Tensor]| -> (f64, Vec<u32>) {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        (t.value(l).item().unwrap() as f64, t.branch_pattern())
    };
    let mut r = rng(seed);
    let mut errs = Vec::new();
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(v);
        let noise = unit(&randn(inputs[i].shape(), &mut r));
        let dir = if g.norm() > 0.0 { unit(&unit(&g).zip_map(&noise, |a, b| a + 0.3 * b).unwrap()) } else { noise };
        let analytic: f64 = g.data().iter().zip(dir.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let shifted = |sign: f32, h: f32| {
            let mut xs = inputs.to_vec();
            xs[i] = inputs[i].zip_map(&dir, |x, d| x + sign * h * d).unwrap();
            eval(&xs)
        };
        // A central difference straddling a ReLU or max-pool kink measures the
        // average of two slopes, so shrink the step until both ends stay on the
        // linear piece the gradient was taken on.
        let mut step = h;
        let (mut plus, mut minus) = (shifted(1.0, step), shifted(-1.0, step));
        for _ in 0..MAX_HALVINGS {
            if plus.1 == pattern && minus.1 == pattern {
                break;
            }
            step /= 2.0;
            (plus, minus) = (shifted(1.0, step), shifted(-1.0, step));
        }
        let fd = (plus.0 - minus.0) / (2.0 * step as f64);
        let denom = fd.abs().max(analytic.abs());
        errs.push(if denom < 1e-6 { 0.0 } else { (fd - analytic).abs() / denom });
    }
    errs
}

/// `sum(out * w)` for a fixed random `w`, turning any op output into a scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(out), &mut rng(seed));
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

/// NT-Xent written as the textbook double loop, in f64.
pub fn nt_xent_oracle(z: &Tensor, partners: &[usize], tau: f64) -> f64 {
    let rows = z.shape()[0];
    let normed: Vec<Vec<f64>> = (0..rows)
        .map(|i| {
            let r: Vec<f64> = z.row(i).iter().map(|&v| v as f64).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..rows {
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += (sim(i, k) / tau).exp();
            }
        }
        total += -((sim(i, partners[i]) / tau).exp() / denom).ln();
    }
    total / rows as f64
}

/// Eval-mode `BN(conv(x))` for one `[C, H, W]` input, 3x3 kernel, stride 1,
/// padding 1, evaluated in f64 from the layer's f32 parameters.
pub fn conv_bn_eval_f64(layer: &LayerGroup, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let s = layer.conv_weight.shape();
    let (k, c, kh, kw) = (s[0], s[1], s[2], s[3]);
    let wt = layer.conv_weight.data();
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; k * h * w];
    for o in 0..k {
        let g = layer.gamma.data()[o] as f64;
        let b = layer.beta.data()[o] as f64;
        let mu = layer.running_mean.data()[o] as f64;
        let var = layer.running_var.data()[o] as f64;
        let denom = (var + layer.eps as f64).sqrt();
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let (iy, ix) =
                                (y as isize + dy as isize - ph as isize, xx as isize + dx as isize - pw as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = wt[((o * c + ci) * kh + dy) * kw + dx] as f64;
                            acc += wv * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = (acc - mu) / denom * g + b;
            }
        }
    }
    out
}

/// Layer whose conv has Frobenius norm `s`, with per-filter norms spread so
/// the smallest-norm channel has true output variance `min_var` under
/// standard-normal inputs. Running statistics match those true moments.
pub fn consistent_layer(k: usize, c: usize, s: f32, min_var: f32, seed: u64) -> LayerGroup {
    let mut r = rng(seed);
    let mut weight = randn(&[k, c, 3, 3], &mut r);
    let len = c * 9;
    // Filter 0 gets norm sqrt(min_var); the others share the remaining mass.
    let rest = ((s * s - min_var) / (k - 1) as f32).max(0.0).sqrt();
    for (f, chunk) in weight.data_mut().chunks_mut(len).enumerate() {
        let n = chunk.iter().map(|v| v * v).sum::<f32>().sqrt();
        let target = if f == 0 { min_var.sqrt() } else { rest };
        chunk.iter_mut().for_each(|v| *v *= target / n);
    }
    let norms: Vec<f32> = weight.data().chunks(len).map(|c| c.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
    LayerGroup {
        name: "block0".into(),
        conv_weight: weight,
        gamma: uniform(&[k], 0.5, 1.5, &mut r),
        beta: uniform(&[k], -0.5, 0.5, &mut r),
        running_mean: Tensor::zeros(vec![k]),
        running_var: Tensor::new(vec![k], norms.iter().map(|n| n * n).collect()).unwrap(),
        eps: 1e-5,
    }
}

/// Max abs difference of eval-mode conv+BN outputs over `n_inputs` random
/// standard-normal `[C, 8, 8]` inputs.
pub fn preservation_gap(before: &LayerGroup, after: &LayerGroup, n_inputs: usize, seed: u64) -> f64 {
    let c = before.conv_weight.shape()[1];
    let (h, w) = (8, 8);
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..n_inputs {
        let x: Vec<f64> = (0..c * h * w).map(|_| normal.sample(&mut r)).collect();
        let a = conv_bn_eval_f64(before, &x, h, w);
        let b = conv_bn_eval_f64(after, &x, h, w);
        worst = a.iter().zip(&b).fold(worst, |m, (p, q)| m.max((p - q).abs()));
    }
    worst
}

pub fn tiny_spec() -> ModelSpec {
    ModelSpec { in_channels: 3, input_size: 8, blocks: vec![4, 8] }
}

/// MiniNet with conv weights multiplied by `factor` and non-trivial BN parameters.
pub fn scaled_mininet(factor: f32, seed: u64) -> TensorMap {
    let mut params = Model::build(ModelSpec::default(), seed).unwrap().into_params();
    let mut r = rng(seed ^ 0xabc);
    for (name, t) in params.iter_mut() {
        if name.ends_with("conv.weight") {
            *t = t.scale(factor);
        } else if name.ends_with("gamma") {
            *t = uniform(t.shape(), 0.5, 1.5, &mut r);
        } else if name.ends_with("beta") || name.ends_with("running_mean") {
            *t = uniform(t.shape(), -0.5, 0.5, &mut r);
        } else if name.ends_with("running_var") {
            *t = uniform(t.shape(), 0.1, 2.0, &mut r);
        }
    }
    params
}

/// Zero out whole filters of `block{b}` so they count as dead.
pub fn kill_filters(params: &mut TensorMap, block: usize, filters: &[usize], residual: f32) {
    let t = params.get_mut(&format!("block{block}.conv.weight")).unwrap();
    let len = t.numel() / t.shape()[0];
    for &f in filters {
        for v in &mut t.data_mut()[f * len..(f + 1) * len] {
            *v *= residual;
        }
    }
}
