//! Data model: the user-item bipartite graph, the hyper-relational
//! statement store, and the item-entity alignment.
//!
//! External ids are arbitrary integers; internally every namespace is
//! densified to 0-based contiguous indices in first-seen order so that
//! embedding tables can be plain arrays. The original ids are kept in
//! sidecar maps and used when serializing back to TSV.
//!
//! File grammar (UTF-8, LF, `#` comments, blank lines ignored):
//! - `interactions.tsv`: `user_id<TAB>item_id`
//! - `statements.tsv`:   `h<TAB>r<TAB>t[<TAB>qr<TAB>qv]*`
//! - `alignment.tsv`:    `item_id<TAB>entity_id`

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use thiserror::Error;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub usize);
    };
}

id_newtype!(UserId);
id_newtype!(ItemId);
id_newtype!(EntityId);
id_newtype!(RelationId);

#[derive(Error, Debug)]
pub enum ParseError {
    #[error("line {line}: malformed line: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: odd qualifier field count")]
    OddQualifiers { line: usize },
    #[error("alignment is not injective: entity {entity} mapped from items {first} and {second}")]
    NonInjective {
        entity: i64,
        first: i64,
        second: i64,
    },
    #[error("alignment missing for items: {0:?}")]
    MissingItems(Vec<i64>),
}

/// Sidecar map from external integer ids to dense 0-based indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    to_dense: HashMap<i64, usize>,
    originals: Vec<i64>,
}

impl IdMap {
    pub fn intern(&mut self, external: i64) -> usize {
        if let Some(&d) = self.to_dense.get(&external) {
            return d;
        }
        let d = self.originals.len();
        self.to_dense.insert(external, d);
        self.originals.push(external);
        d
    }

    pub fn get(&self, external: i64) -> Option<usize> {
        self.to_dense.get(&external).copied()
    }

    pub fn original(&self, dense: usize) -> i64 {
        self.originals[dense]
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

/// Sparse user-item bipartite adjacency with degree caches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionGraph {
    edges: BTreeSet<(usize, usize)>,
    user_neighbors: Vec<Vec<usize>>,
    item_neighbors: Vec<Vec<usize>>,
    pub user_map: IdMap,
    pub item_map: IdMap,
}

impl InteractionGraph {
    pub fn n_users(&self) -> usize {
        self.user_neighbors.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_neighbors.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: UserId, v: ItemId) -> bool {
        self.edges.contains(&(u.0, v.0))
    }

    /// Sorted item neighbors of a user.
    pub fn user_neighbors(&self, u: UserId) -> &[usize] {
        &self.user_neighbors[u.0]
    }

    /// Sorted user neighbors of an item.
    pub fn item_neighbors(&self, v: ItemId) -> &[usize] {
        &self.item_neighbors[v.0]
    }

    pub fn user_degree(&self, u: UserId) -> usize {
        self.user_neighbors[u.0].len()
    }

    pub fn item_degree(&self, v: ItemId) -> usize {
        self.item_neighbors[v.0].len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (UserId, ItemId)> + '_ {
        self.edges.iter().map(|&(u, v)| (UserId(u), ItemId(v)))
    }

    /// Build a graph from already-dense edge pairs. Duplicates collapse.
    pub fn from_dense_edges(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut g = InteractionGraph {
            user_neighbors: vec![Vec::new(); n_users],
            item_neighbors: vec![Vec::new(); n_items],
            ..Default::default()
        };
        for i in 0..n_users {
            g.user_map.intern(i as i64);
        }
        for i in 0..n_items {
            g.item_map.intern(i as i64);
        }
        for (u, v) in pairs {
            g.insert_edge(u, v);
        }
        g.sort_neighbors();
        g
    }

    fn insert_edge(&mut self, u: usize, v: usize) {
        if self.edges.insert((u, v)) {
            if self.user_neighbors.len() <= u {
                self.user_neighbors.resize(u + 1, Vec::new());
            }
            if self.item_neighbors.len() <= v {
                self.item_neighbors.resize(v + 1, Vec::new());
            }
            self.user_neighbors[u].push(v);
            self.item_neighbors[v].push(u);
        }
    }

    fn sort_neighbors(&mut self) {
        for n in &mut self.user_neighbors {
            n.sort_unstable();
        }
        for n in &mut self.item_neighbors {
            n.sort_unstable();
        }
    }

    /// Emit the TSV form using original external ids, in edge order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (u, v) in &self.edges {
            let _ = writeln!(
                out,
                "{}\t{}",
                self.user_map.original(*u),
                self.item_map.original(*v)
            );
        }
        out
    }
}

/// One hyper-relational fact: a base triplet plus ordered qualifier pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub qualifiers: Vec<(RelationId, EntityId)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatementStore {
    statements: Vec<Statement>,
    head_index: Vec<Vec<usize>>,
    pub entity_map: IdMap,
    pub relation_map: IdMap,
}

impl StatementStore {
    pub fn statements(&self) -> &[Statement] {
        &self.statements
    }

    pub fn n_entities(&self) -> usize {
        self.entity_map.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_map.len()
    }

    /// All statements whose head is `h`, in insertion order. Empty for an
    /// isolated entity.
    pub fn statements_for_head(&self, h: EntityId) -> Vec<&Statement> {
        match self.head_index.get(h.0) {
            Some(idx) => idx.iter().map(|&i| &self.statements[i]).collect(),
            None => Vec::new(),
        }
    }

    pub fn push(&mut self, st: Statement) {
        if self.head_index.len() <= st.head.0 {
            self.head_index.resize(st.head.0 + 1, Vec::new());
        }
        self.head_index[st.head.0].push(self.statements.len());
        self.statements.push(st);
    }

    /// Intern an entity that appears outside any statement (e.g. only in
    /// the alignment file).
    pub fn intern_entity(&mut self, external: i64) -> EntityId {
        EntityId(self.entity_map.intern(external))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for st in &self.statements {
            let _ = write!(
                out,
                "{}\t{}\t{}",
                self.entity_map.original(st.head.0),
                self.relation_map.original(st.relation.0),
                self.entity_map.original(st.tail.0)
            );
            for (qr, qv) in &st.qualifiers {
                let _ = write!(
                    out,
                    "\t{}\t{}",
                    self.relation_map.original(qr.0),
                    self.entity_map.original(qv.0)
                );
            }
            out.push('\n');
        }
        out
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn parse_int(field: &str, line: usize) -> Result<i64, ParseError> {
    field.trim().parse().map_err(|_| ParseError::Malformed {
        line,
        msg: format!("expected integer, got {field:?}"),
    })
}

/// Parse `user_id<TAB>item_id` lines. Duplicate pairs collapse silently:
/// interactions are binary presence flags.
pub fn parse_interactions(text: &str) -> Result<InteractionGraph, ParseError> {
    let mut g = InteractionGraph::default();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 2 {
            return Err(ParseError::Malformed {
                line,
                msg: format!("expected 2 tab-separated fields, got {}", fields.len()),
            });
        }
        let u = g.user_map.intern(parse_int(fields[0], line)?);
        let v = g.item_map.intern(parse_int(fields[1], line)?);
        g.insert_edge(u, v);
    }
    g.sort_neighbors();
    // Cold users/items with no edges still need slots.
    g.user_neighbors.resize(g.user_map.len(), Vec::new());
    g.item_neighbors.resize(g.item_map.len(), Vec::new());
    Ok(g)
}

/// Parse `h<TAB>r<TAB>t[<TAB>qr<TAB>qv]*` lines. Duplicate statements are
/// kept: facts are multisets.
pub fn parse_statements(text: &str) -> Result<StatementStore, ParseError> {
    let mut store = StatementStore::default();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() < 3 {
            return Err(ParseError::Malformed {
                line,
                msg: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        if (fields.len() - 3) % 2 != 0 {
            return Err(ParseError::OddQualifiers { line });
        }
        let head = EntityId(store.entity_map.intern(parse_int(fields[0], line)?));
        let relation = RelationId(store.relation_map.intern(parse_int(fields[1], line)?));
        let tail = EntityId(store.entity_map.intern(parse_int(fields[2], line)?));
        let mut qualifiers = Vec::new();
        for pair in fields[3..].chunks(2) {
            let qr = RelationId(store.relation_map.intern(parse_int(pair[0], line)?));
            let qv = EntityId(store.entity_map.intern(parse_int(pair[1], line)?));
            qualifiers.push((qr, qv));
        }
        store.push(Statement {
            head,
            relation,
            tail,
            qualifiers,
        });
    }
    Ok(store)
}

/// Parse `item_id<TAB>entity_id` lines into a total injective map over the
/// graph's items, interning entities unseen in any statement.
///
/// Returns a vector indexed by dense [`ItemId`] holding dense [`EntityId`]s.
pub fn parse_alignment(
    text: &str,
    graph: &InteractionGraph,
    store: &mut StatementStore,
) -> Result<Vec<EntityId>, ParseError> {
    let mut by_item: HashMap<usize, (i64, i64)> = HashMap::new();
    let mut seen_entities: HashMap<i64, i64> = HashMap::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 2 {
            return Err(ParseError::Malformed {
                line,
                msg: format!("expected 2 tab-separated fields, got {}", fields.len()),
            });
        }
        let item_ext = parse_int(fields[0], line)?;
        let entity_ext = parse_int(fields[1], line)?;
        if let Some(&first_item) = seen_entities.get(&entity_ext) {
            if first_item != item_ext {
                return Err(ParseError::NonInjective {
                    entity: entity_ext,
                    first: first_item,
                    second: item_ext,
                });
            }
        }
        seen_entities.insert(entity_ext, item_ext);
        // Items not present in the interaction graph are ignored.
        if let Some(item) = graph.item_map.get(item_ext) {
            by_item.insert(item, (item_ext, entity_ext));
        }
    }
    let missing: Vec<i64> = (0..graph.n_items())
        .filter(|i| !by_item.contains_key(i))
        .map(|i| graph.item_map.original(i))
        .collect();
    if !missing.is_empty() {
        return Err(ParseError::MissingItems(missing));
    }
    Ok((0..graph.n_items())
        .map(|i| store.intern_entity(by_item[&i].1))
        .collect())
}
