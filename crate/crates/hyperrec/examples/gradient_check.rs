//! Verify tape gradients of a small composed expression against central
//! finite differences.
//!
//! Run with: `cargo run --example gradient_check`

use hyperrec::numerics::gradient_check;
use hyperrec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let w = Tensor::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());

    // f(x, w) = sum(tanh(leaky_relu(x w)^T (x w)))
    let report = gradient_check(
        |tape, vars| {
            let (x, w) = (vars[0], vars[1]);
            let h = tape.matmul(x, w)?;
            let a = tape.leaky_relu(h, 0.2);
            let g = tape.matmul(tape.transpose(a), h)?;
            Ok(tape.sum_all(tape.tanh(g)))
        },
        &[x, w],
        1e-5,
    )
    .unwrap();

    println!("max relative error: {:.3e}", report.max_rel_err);
    if let Some((input, coord, analytic, numeric)) = report.worst {
        println!(
            "worst coordinate: input {input}, flat index {coord}: \
             analytic {analytic:.9e} vs numeric {numeric:.9e}"
        );
    }
    assert!(report.max_rel_err < 1e-6);
    println!("gradients agree with finite differences");
}
