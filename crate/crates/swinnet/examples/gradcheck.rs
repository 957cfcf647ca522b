//! Verify analytic gradients against central finite differences.
//!
//! Runs the checker over a few composite functions built from the tensor
//! primitives and prints the worst relative error for each.

use swinnet::tensor::{grad_check, ops, Tensor};

fn main() {
    let x = Tensor::<f64>::from_vec(
        &[2, 8],
        (0..16).map(|i| 0.3 * (i as f64 - 7.5) / 7.5).collect(),
    )
    .unwrap();

    type Case = Box<dyn Fn(&Tensor<f64>) -> swinnet::Result<Tensor<f64>>>;
    let cases: Vec<(&str, Case)> = vec![
        (
            "sigmoid -> gelu -> sum of squares",
            Box::new(|t: &Tensor<f64>| {
                let s = ops::sigmoid(t)?;
                let g = ops::gelu(&s)?;
                ops::sum_all(&ops::mul(&g, &g)?)
            }),
        ),
        (
            "softmax -> weighted sum",
            Box::new(|t: &Tensor<f64>| {
                let s = ops::softmax_last(t)?;
                let w = Tensor::from_vec(&[2, 8], (0..16).map(|i| i as f64).collect())?;
                ops::sum_all(&ops::mul(&s, &w)?)
            }),
        ),
        (
            "layer norm -> relu -> sum",
            Box::new(|t: &Tensor<f64>| {
                let gamma = Tensor::ones(&[8]);
                let beta = Tensor::zeros(&[8]);
                let n = ops::layer_norm(t, &gamma, &beta, 1e-5)?;
                ops::sum_all(&ops::relu(&n)?)
            }),
        ),
        (
            "matmul chain",
            Box::new(|t: &Tensor<f64>| {
                let a = t.reshape(&[1, 4, 4])?;
                let b = ops::matmul(&a, &a)?;
                ops::sum_all(&ops::mul(&b, &b)?)
            }),
        ),
    ];

    for (name, f) in cases {
        let err = grad_check(&f, &x, 1e-5).unwrap();
        let verdict = if err < 1e-5 { "ok" } else { "FAIL" };
        println!("{verdict}  {name:<32} max rel err {err:.3e}");
    }
}
