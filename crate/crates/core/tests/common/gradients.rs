//! Finite-difference checks for every differentiable op and for a complete
//! encoder + projector + NT-Xent graph.

use reprime::contrastive::{byol_regression, nt_xent_loss, MlpHead, PROJECTOR};
use reprime::model::Model;
use reprime::params::BoundParams;
use reprime::{Mode, Tape, Tensor, Var};

use super::{grad_check, randn, rng, tiny_spec, uniform, weighted_sum};

pub struct GradCase {
    pub name: &'static str,
    pub max_rel_err: f64,
}

const H: f32 = 1e-2;

fn case(name: &'static str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> reprime::Result<Var>) -> GradCase {
    let errs = grad_check(inputs, H, name.len() as u64, f);
    GradCase { name, max_rel_err: errs.into_iter().fold(0.0, f64::max) }
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mag = uniform(shape, 0.2, 1.0, &mut r);
    let sign = uniform(shape, -1.0, 1.0, &mut r);
    mag.zip_map(&sign, |m, s| if s < 0.0 { -m } else { m }).unwrap()
}

/// Distinct values spaced 0.1 apart in shuffled order, so max-pool winners never tie.
fn spaced(shape: &[usize], seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - n as f32 * 0.05).collect();
    vals.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn suite() -> Vec<GradCase> {
    let mut r = rng(42);
    let a = randn(&[3, 4], &mut r);
    let b = randn(&[3, 4], &mut r);
    let row = randn(&[4], &mut r);
    let m1 = randn(&[3, 5], &mut r);
    let m2 = randn(&[5, 4], &mut r);
    let m2t = randn(&[4, 5], &mut r);
    let img = randn(&[2, 3, 6, 6], &mut r);
    let img7 = randn(&[2, 3, 7, 7], &mut r);
    let kern = randn(&[4, 3, 3, 3], &mut r).scale(0.3);
    let bn_x = randn(&[4, 3, 4, 4], &mut r);
    let gamma = uniform(&[3], 0.5, 1.5, &mut r);
    let beta = randn(&[3], &mut r);
    let rows = randn(&[4, 5], &mut r);
    let emb = randn(&[8, 5], &mut r);
    let pred = randn(&[6, 5], &mut r);
    let target = randn(&[6, 5], &mut r);
    let rm = [0.1f32, -0.2, 0.3];
    let rv = [0.5f32, 1.5, 2.0];

    let mut out = vec![
        case("add", &[a.clone(), b.clone()], |t, v| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, 1)
        }),
        case("sub", &[a.clone(), b.clone()], |t, v| {
            let o = t.sub(v[0], v[1])?;
            weighted_sum(t, o, 2)
        }),
        case("mul", &[a.clone(), b.clone()], |t, v| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, 3)
        }),
        case("scale", std::slice::from_ref(&a), |t, v| {
            let o = t.scale(v[0], 1.7);
            weighted_sum(t, o, 4)
        }),
        case("add_row_vector", &[a.clone(), row], |t, v| {
            let o = t.add_row_vector(v[0], v[1])?;
            weighted_sum(t, o, 5)
        }),
        case("relu", &[off_zero(&[3, 4], 6)], |t, v| {
            let o = t.relu(v[0]);
            weighted_sum(t, o, 6)
        }),
        case("matmul", &[m1.clone(), m2], |t, v| {
            let o = t.matmul(v[0], v[1], false)?;
            weighted_sum(t, o, 7)
        }),
        case("matmul_trans_b", &[m1, m2t], |t, v| {
            let o = t.matmul(v[0], v[1], true)?;
            weighted_sum(t, o, 8)
        }),
        case("conv2d", &[img.clone(), kern.clone()], |t, v| {
            let o = t.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(t, o, 9)
        }),
        case("conv2d_stride2", &[img7, kern], |t, v| {
            let o = t.conv2d(v[0], v[1], 2, 0)?;
            weighted_sum(t, o, 10)
        }),
        case("batch_norm_train", &[bn_x.clone(), gamma.clone(), beta.clone()], move |t, v| {
            let (o, _) = t.batch_norm(v[0], v[1], v[2], &rm, &rv, 1e-5, Mode::Train)?;
            weighted_sum(t, o, 11)
        }),
        case("batch_norm_eval", &[bn_x, gamma, beta], move |t, v| {
            let (o, _) = t.batch_norm(v[0], v[1], v[2], &rm, &rv, 1e-5, Mode::Eval)?;
            weighted_sum(t, o, 12)
        }),
        case("max_pool2", &[spaced(&[2, 2, 4, 4], 13)], |t, v| {
            let o = t.max_pool2(v[0])?;
            weighted_sum(t, o, 13)
        }),
        case("global_avg_pool", &[img], |t, v| {
            let o = t.global_avg_pool(v[0])?;
            weighted_sum(t, o, 14)
        }),
        case("sum", std::slice::from_ref(&a), |t, v| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }),
        case("mean", std::slice::from_ref(&a), |t, v| {
            let s = t.mean(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }),
        case("l2_normalize_rows", std::slice::from_ref(&rows), |t, v| {
            let o = t.l2_normalize_rows(v[0])?;
            weighted_sum(t, o, 17)
        }),
        case("log_softmax_rows", std::slice::from_ref(&rows), |t, v| {
            let o = t.log_softmax_rows(v[0])?;
            weighted_sum(t, o, 18)
        }),
        case("softmax_rows", std::slice::from_ref(&rows), |t, v| {
            let o = t.softmax_rows(v[0])?;
            weighted_sum(t, o, 19)
        }),
        case("mask_fill", &[randn(&[4, 4], &mut r)], |t, v| {
            let o = t.mask_fill(v[0], &[0, 5, 10, 15])?;
            let o = t.log_softmax_rows(o)?;
            let kept = t.gather(o, &[1, 4, 11, 14])?;
            weighted_sum(t, kept, 20)
        }),
        case("gather", std::slice::from_ref(&a), |t, v| {
            let o = t.gather(v[0], &[0, 3, 3, 7, 11])?;
            weighted_sum(t, o, 21)
        }),
        case("reshape", &[a], |t, v| {
            let o = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, o, 22)
        }),
        case("nt_xent", &[emb], |t, v| {
            let partners: Vec<usize> = (0..8).map(|i| (i + 4) % 8).collect();
            nt_xent_loss(t, v[0], &partners, 0.5)
        }),
        case("byol_regression", &[pred], move |t, v| {
            let c = t.constant(target.clone());
            byol_regression(t, v[0], c)
        }),
    ];
    out.push(full_graph());
    out
}

/// Tiny encoder + projection head + NT-Xent, checked against every parameter tensor.
fn full_graph() -> GradCase {
    let spec = tiny_spec();
    let model = Model::build(spec.clone(), 5).unwrap();
    let mut r = rng(77);
    let head = MlpHead::new(PROJECTOR, spec.feature_dim(), 6, 4, &mut r);
    let mut names: Vec<String> = model.params().keys().filter(|k| reprime::model::is_trainable(k)).cloned().collect();
    let mut tensors: Vec<Tensor> = names.iter().map(|k| model.params()[k].clone()).collect();
    // Move BN affine parameters off identity so their gradients are generic.
    for (n, t) in names.iter().zip(tensors.iter_mut()) {
        if n.ends_with("gamma") {
            *t = uniform(t.shape(), 0.5, 1.5, &mut r);
        } else if n.ends_with("beta") {
            *t = uniform(t.shape(), -0.3, 0.3, &mut r);
        }
    }
    names.push(MlpHead::w1_name(PROJECTOR));
    names.push(MlpHead::w2_name(PROJECTOR));
    tensors.push(head.w1.clone());
    tensors.push(head.w2.clone());
    let batch = randn(&[8, 3, 8, 8], &mut r);
    let errs = grad_check(&tensors, H, 99, |t, v| {
        let bound: BoundParams = names.iter().cloned().zip(v.iter().copied()).collect();
        let x = t.constant(batch.clone());
        let (f, _) = model.forward(t, &bound, x, Mode::Train)?;
        let z = MlpHead::forward(t, &bound, PROJECTOR, f)?;
        let partners: Vec<usize> = (0..8).map(|i| (i + 4) % 8).collect();
        nt_xent_loss(t, z, &partners, 0.5)
    });
    GradCase { name: "mininet_nt_xent_graph", max_rel_err: errs.into_iter().fold(0.0, f64::max) }
}
