//! Train a small model on a generated corpus and report held-out ranking
//! quality, all through the library API (the `hyperrec` binary wraps the
//! same calls).
//!
//! Run with: `cargo run --release --example train_and_evaluate`

use hyperrec::data::{parse_alignment, parse_interactions, parse_statements};
use hyperrec::eval::{density_group_eval, evaluate};
use hyperrec::synth::{generate, GeneratorConfig};
use hyperrec::trainer::{
    forward_values, init_params, split_edges, train, Dataset, TrainingConfig,
};

fn main() {
    let files = generate(&GeneratorConfig::default()).unwrap();
    let graph = parse_interactions(&files.interactions).unwrap();
    let mut store = parse_statements(&files.statements).unwrap();
    let alignment = parse_alignment(&files.alignment, &graph, &mut store).unwrap();
    let data = Dataset { graph, store, alignment };

    let cfg = TrainingConfig {
        dim: 16,
        layers: 2,
        k: 4,
        epochs: 40,
        lambda1: 2e-2,
        tau: 0.25,
        seed: 12,
        ..TrainingConfig::default()
    };
    let split = split_edges(&data.graph, cfg.seed);
    println!(
        "training on {} edges, validating on {}, testing on {}",
        split.train.n_edges(),
        split.valid.len(),
        split.test.len()
    );

    let outcome = train(&data, &split, init_params(&data, &cfg)).unwrap();
    println!(
        "best validation recall@20 {:.4} at epoch {}",
        outcome.best_recall, outcome.best_epoch
    );

    let (users, items) = forward_values(&data, &split.train, &outcome.best).unwrap();
    let report = evaluate(&users, &items, Some(&split.train), &split.test, 20);
    println!(
        "test recall@20 {:.4}, ndcg@20 {:.4} over {} users",
        report.recall, report.ndcg, report.n_users
    );

    println!("\nby item-popularity quartile (sparsest first):");
    for g in density_group_eval(&users, &items, &split.train, &split.test, 4, 20) {
        println!(
            "  group {}: {} items, mean degree {:.1}, recall@20 {:.4}",
            g.group, g.n_items, g.mean_degree, g.recall
        );
    }
}
