//! Autodiff against central finite differences, first and second order.

use std::sync::Arc;

use gradtape::{grad, nn, Tensor, Var, PAD};
use proptest::prelude::*;

const EPS: f64 = 1e-6;

/// Central differences of a scalar function of one tensor argument.
fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
    let base = x.to_vec();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += EPS;
            let fp = f(&Tensor::new(x.shape().to_vec(), p.clone()).unwrap());
            p[i] -= 2.0 * EPS;
            let fm = f(&Tensor::new(x.shape().to_vec(), p).unwrap());
            (fp - fm) / (2.0 * EPS)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

fn check(f: impl Fn(&Var) -> Var, x: Tensor) {
    let xv = Var::param(x.clone());
    let y = f(&xv);
    let g = grad(&y, &[xv], false).unwrap().remove(0);
    let fd = numeric_grad(&|t| f(&Var::constant(t.clone())).item(), &x);
    let err = rel_err(g.value().data(), &fd);
    assert!(err < 1e-6, "relative error {err}: analytic {:?} vs fd {:?}", g.value().data(), fd);
}

/// Checks the Hessian-vector product `d/dx <grad f(x), v>`.
fn check_second(f: impl Fn(&Var) -> Var, x: Tensor, v: Tensor) {
    let hv = |t: &Tensor, create: bool| -> (Var, Var) {
        let xv = Var::param(t.clone());
        let g = grad(&f(&xv), &[xv.clone()], create).unwrap().remove(0);
        let dot = g.mul(&Var::constant(v.clone())).unwrap().sum();
        (dot, xv)
    };
    let (dot, xv) = hv(&x, true);
    let h = grad(&dot, &[xv], false).unwrap().remove(0);
    let fd = numeric_grad(&|t| hv(t, false).0.item(), &x);
    let err = rel_err(h.value().data(), &fd);
    assert!(err < 1e-5, "second-order relative error {err}: {:?} vs {:?}", h.value().data(), fd);
}

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..rows * cols)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn matmul_tanh_chain() {
    let w = Var::constant(mat(3, 4, 1));
    check(|x| x.matmul(&w).unwrap().tanh().square().sum(), mat(2, 3, 2));
    check_second(|x| x.matmul(&w).unwrap().tanh().square().sum(), mat(2, 3, 2), mat(2, 3, 3));
}

#[test]
fn broadcasting_ops() {
    let row = Var::constant(mat(1, 4, 4).reshape(&[4]).unwrap());
    check(|x| (&(x * &row) + &row).div(&x.square().add_scalar(1.0)).unwrap().sum(), mat(3, 4, 5));
    // gradient w.r.t. the broadcast operand
    let big = Var::constant(mat(3, 4, 6));
    check(|r| (&big * &r.exp()).sum(), mat(1, 4, 7).reshape(&[4]).unwrap());
    check_second(
        |r| (&big * &r.exp()).square().sum(),
        mat(1, 4, 8).reshape(&[4]).unwrap(),
        mat(1, 4, 9).reshape(&[4]).unwrap(),
    );
}

#[test]
fn normalisation_and_losses() {
    let gain = Var::constant(mat(1, 5, 10).reshape(&[5]).unwrap());
    let bias = Var::constant(mat(1, 5, 11).reshape(&[5]).unwrap());
    let f = |x: &Var| {
        let h = nn::feature_norm(x, &gain, &bias, 1e-5).unwrap();
        nn::cross_entropy(&nn::normalize_rows(&h, 1e-12).unwrap().scale(10.0), &[0, 3, 4]).unwrap()
    };
    check(f, mat(3, 5, 12));
    check_second(f, mat(3, 5, 12), mat(3, 5, 13));
}

#[test]
fn gather_scatter_reshape() {
    let idx: Arc<[usize]> = vec![3, PAD, 0, 1, 1, 5].into();
    let f = |x: &Var| {
        let g = x.reshape(&[6]).unwrap().gather(idx.clone(), &[2, 3]).unwrap();
        g.t().unwrap().tanh().scatter_add(idx.clone(), &[6]).unwrap().powf(2.0).sum()
    };
    check(f, mat(2, 3, 14));
    check_second(f, mat(2, 3, 14), mat(2, 3, 15));
}

#[test]
fn meta_gradient_through_sgd_step() {
    // theta' = theta - lr * dL/dtheta;  outer = sum(theta'^3)
    let lr = 0.3;
    let outer = |theta: &Var| {
        let inner = theta.tanh().mul(&Var::constant(mat(1, 3, 16).reshape(&[3]).unwrap())).unwrap().sum();
        let g = grad(&inner, &[theta.clone()], true).unwrap().remove(0);
        let stepped = theta.sub(&g.scale(lr)).unwrap();
        stepped.powf(3.0).sum()
    };
    let x = mat(1, 3, 17).reshape(&[3]).unwrap();
    let xv = Var::param(x.clone());
    let analytic = grad(&outer(&xv), &[xv], false).unwrap().remove(0);
    let fd = numeric_grad(
        &|t| {
            // evaluate with a fresh param so the inner grad exists
            let v = Var::param(t.clone());
            outer(&v).item()
        },
        &x,
    );
    assert!(rel_err(analytic.value().data(), &fd) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_ops_agree_with_fd(seed in 0u64..10_000) {
        let w = Var::constant(mat(4, 2, seed ^ 0xabc));
        let f = |x: &Var| (&x.matmul(&w).unwrap() - &x.sum_axis(1).unwrap()).exp().mean();
        let x = mat(3, 4, seed);
        let xv = Var::param(x.clone());
        let g = grad(&f(&xv), &[xv], false).unwrap().remove(0);
        let fd = numeric_grad(&|t| f(&Var::constant(t.clone())).item(), &x);
        prop_assert!(rel_err(g.value().data(), &fd) < 1e-6);
    }
}
