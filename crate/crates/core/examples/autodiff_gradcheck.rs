//! Builds a small two-layer network on the reverse-mode graph, backpropagates
//! a squared-error loss and compares the gradients with central differences.

use soke::grad::{check_gradients, Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5])?;
    let w1 = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w2 = Tensor::matrix(4, 1, vec![0.3, -0.2, 0.8, 0.1])?;

    let net = |g: &mut Graph, v: &[soke::grad::Var]| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.tanh(h);
        let y = g.matmul(h, v[2])?;
        Ok(g.sum_squares(y))
    };

    let mut g = Graph::new();
    let vars = [g.input(x.clone()), g.input(w1.clone()), g.input(w2.clone())];
    let loss = net(&mut g, &vars)?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());
    println!("dL/dW2 {:.4?}", g.grad(vars[2]).expect("input has a gradient"));

    let report = check_gradients(&[x, w1, w2], 1e-6, net)?;
    println!(
        "checked {} entries: max relative error {:.2e}, max absolute error {:.2e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    assert!(report.max_rel_error < 1e-6);
    Ok(())
}
