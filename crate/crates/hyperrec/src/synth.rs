//! Cluster-structured synthetic corpus generator.
//!
//! Users and items are assigned round-robin to C clusters. Interactions
//! fire with probability `p_in` inside a cluster and `p_out` across, so
//! the recommendation signal is recoverable. Each item's entity heads two
//! statements: a hub statement through its cluster's relation, shared
//! within the cluster, and a topic statement. A fraction `qualifier_rate`
//! of hub statements carries 1..=3 qualifier pairs that pin down the
//! individual item behind the shared cluster fact.
//!
//! External id ranges: items 0.., cluster hubs 1000+c, qualifier values
//! 2000+.., topics 3000+c, cluster relations 0..C, qualifier relations
//! 100.., topic relation 60.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("p_in ({p_in}) must exceed p_out ({p_out})")]
    Infeasible { p_in: f64, p_out: f64 },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("need at least 1 cluster and clusters ({clusters}) <= min(users {users}, items {items})")]
    BadClusterCount {
        clusters: usize,
        users: usize,
        items: usize,
    },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Fraction of hub statements that carry qualifiers.
    pub qualifier_rate: f64,
    /// Edges are added inside the cluster until every user reaches this.
    pub min_user_degree: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            users: 50,
            items: 60,
            clusters: 5,
            p_in: 0.35,
            p_out: 0.02,
            qualifier_rate: 0.5,
            min_user_degree: 6,
            seed: 1,
        }
    }
}

/// Generated TSV payloads, ready to be written or parsed directly.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub interactions: String,
    pub statements: String,
    pub alignment: String,
    /// Ground-truth labels: `kind<TAB>id<TAB>cluster`.
    pub clusters: String,
}

pub fn generate(cfg: &GeneratorConfig) -> Result<DatasetFiles, SynthError> {
    for p in [cfg.p_in, cfg.p_out, cfg.qualifier_rate] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SynthError::BadProbability(p));
        }
    }
    if cfg.p_in <= cfg.p_out {
        return Err(SynthError::Infeasible {
            p_in: cfg.p_in,
            p_out: cfg.p_out,
        });
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.users.min(cfg.items) {
        return Err(SynthError::BadClusterCount {
            clusters: cfg.clusters,
            users: cfg.users,
            items: cfg.items,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_cluster = |u: usize| u % cfg.clusters;
    let item_cluster = |v: usize| v % cfg.clusters;

    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); cfg.users];
    for u in 0..cfg.users {
        for v in 0..cfg.items {
            let p = if user_cluster(u) == item_cluster(v) {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.gen_bool(p) {
                edges[u].push(v);
            }
        }
    }
    // Top up sparse users from their own cluster so the split can always
    // hold out edges without orphaning anyone.
    for u in 0..cfg.users {
        let mut candidates: Vec<usize> = (0..cfg.items)
            .filter(|&v| item_cluster(v) == user_cluster(u) && !edges[u].contains(&v))
            .collect();
        while edges[u].len() < cfg.min_user_degree && !candidates.is_empty() {
            let i = rng.gen_range(0..candidates.len());
            edges[u].push(candidates.swap_remove(i));
        }
        edges[u].sort_unstable();
    }

    let mut interactions = String::new();
    for (u, items) in edges.iter().enumerate() {
        for v in items {
            let _ = writeln!(interactions, "{u}\t{v}");
        }
    }

    const TOPIC_RELATION: i64 = 60;
    let mut statements = String::new();
    for v in 0..cfg.items {
        let c = item_cluster(v);
        let _ = write!(statements, "{v}\t{c}\t{}", 1000 + c);
        if rng.gen_bool(cfg.qualifier_rate) {
            let n_quals = rng.gen_range(1..=3usize);
            for slot in 0..n_quals {
                let _ = write!(statements, "\t{}\t{}", 100 + slot, 2000 + v * 4 + slot);
            }
        }
        statements.push('\n');
        let _ = writeln!(statements, "{v}\t{TOPIC_RELATION}\t{}", 3000 + c);
    }

    let mut alignment = String::new();
    for v in 0..cfg.items {
        let _ = writeln!(alignment, "{v}\t{v}");
    }

    let mut clusters = String::new();
    for u in 0..cfg.users {
        let _ = writeln!(clusters, "user\t{u}\t{}", user_cluster(u));
    }
    for v in 0..cfg.items {
        let _ = writeln!(clusters, "item\t{v}\t{}", item_cluster(v));
    }

    Ok(DatasetFiles {
        interactions,
        statements,
        alignment,
        clusters,
    })
}
