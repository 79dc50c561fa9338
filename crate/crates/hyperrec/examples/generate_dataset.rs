//! Generate a cluster-structured synthetic dataset in memory and print a
//! few summary statistics instead of writing files.
//!
//! Run with: `cargo run --example generate_dataset`

use hyperrec::data::{parse_interactions, parse_statements};
use hyperrec::synth::{generate, GeneratorConfig};

fn main() {
    let cfg = GeneratorConfig {
        users: 40,
        items: 50,
        clusters: 5,
        seed: 42,
        ..GeneratorConfig::default()
    };
    let files = generate(&cfg).unwrap();

    let graph = parse_interactions(&files.interactions).unwrap();
    let store = parse_statements(&files.statements).unwrap();
    println!(
        "{} users, {} items, {} interactions",
        graph.n_users(),
        graph.n_items(),
        graph.n_edges()
    );
    println!(
        "{} statements over {} entities and {} relations",
        store.statements().len(),
        store.n_entities(),
        store.n_relations()
    );
    let with_quals = store
        .statements()
        .iter()
        .filter(|s| !s.qualifiers.is_empty())
        .count();
    println!("{with_quals} statements carry qualifiers");
    println!(
        "ground-truth cluster labels: {} rows",
        files.clusters.lines().count()
    );
}
