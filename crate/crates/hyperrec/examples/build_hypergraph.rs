//! Build the top-K dependency hypergraph from a small embedding table and
//! print the incidence structure plus its normalized form.
//!
//! Run with: `cargo run --example build_hypergraph`

use hyperrec::hypergraph::{build_hypergraph, normalize};
use hyperrec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 8;
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let embs = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect());

    let hg = build_hypergraph(&embs, 3);
    println!("hyperedge members and cosine weights (one edge per node):");
    print!("{}", hg.dump_tsv());

    let h_tilde = normalize(&hg).unwrap();
    println!("\ndegree-normalized incidence (rows sum toward the edge degree):");
    for e in 0..n {
        let row: Vec<String> = (0..n).map(|v| format!("{:.3}", h_tilde.row(e)[v])).collect();
        println!("edge {e}: [{}]", row.join(", "));
    }

    let saturated: usize = (0..n).filter(|&u| hg.row(u).len() == 3).count();
    println!("\n{saturated}/{n} edges reached the full K=3 membership");
}
