//! Reverse-mode gradients on a small graph, checked against central differences.

use dabfnet::tensor::{finite_diff_check, Tape, Tensor};

fn main() -> dabfnet::error::Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.3])?);
    let w = tape.param(Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75])?);

    // loss = mean(silu(x @ w)^2)
    let y = tape.matmul(x, w)?;
    let y = tape.silu(y);
    let y = tape.square(y);
    let loss = tape.mean_all(y);
    tape.backward(loss)?;

    println!("loss = {:.6}", tape.value(loss).item());
    println!("dloss/dx = {:?}", tape.grad(x).unwrap());
    println!("dloss/dw = {:?}", tape.grad(w).unwrap());

    let at = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3])?;
    let report = finite_diff_check(
        |t, v| {
            let s = t.sigmoid(v);
            let e = t.exp(s);
            Ok(t.sum_all(e))
        },
        &at,
        1e-5,
        1e-4,
    )?;
    println!(
        "gradcheck exp(sigmoid(x)): {} coordinates, max relative error {:.2e}, passed {}",
        report.checked,
        report.max_rel_error,
        report.passed()
    );
    Ok(())
}
