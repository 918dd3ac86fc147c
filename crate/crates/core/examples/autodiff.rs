//! Reverse-mode gradients on the tape, checked against finite differences.

use p2mx::tensor::{grad_check, ReduceKind, Tape, Tensor};

fn main() -> p2mx::Result<()> {
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::new([3, 2], vec![1.0, 0.5, -0.5, 2.0, 0.25, -1.0])?;

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let h = tape.matmul(xv, wv)?;
    let s = tape.softmax(h)?;
    let m = tape.reduce(s, ReduceKind::Max, 1)?;
    let loss = tape.sum_all(m)?;
    println!("loss = {:.6}", tape.value(loss).item());

    let grads = tape.backward(loss)?;
    println!("d loss / d x = {:?}", grads.get(xv).unwrap().data());

    let err = grad_check(
        |t, x| {
            let w = t.constant(w.clone());
            let h = t.matmul(x, w)?;
            let s = t.softmax(h)?;
            let m = t.reduce(s, ReduceKind::Max, 1)?;
            t.sum_all(m)
        },
        &x,
        1e-6,
    )?;
    println!("relative error vs central differences: {err:.2e}");
    Ok(())
}
