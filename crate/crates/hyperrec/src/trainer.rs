//! Parameter initialization, the training loop, checkpointing, and the
//! ablation switches.
//!
//! Every optimizer step rebuilds the tape from scratch: the hypergraph
//! topology depends on the current embeddings, so the computation graph
//! changes shape between steps. Parameters live in a name-keyed map whose
//! BTreeMap order fixes the leaf order, the checkpoint layout, and the
//! Adam update order, which keeps runs bit-reproducible.
//!
//! Random streams are split per purpose (init / split / epoch loop) so a
//! resumed run consumes exactly the same draws as an uninterrupted one.

use crate::data::{InteractionGraph, ItemId, StatementStore, UserId};
use crate::encoder::{
    encode_all_items_var, Activation, EncodeDiagnostics, EncoderConfig, EncoderError, EncoderVariant,
    EncoderVars, PhiMode,
};
use crate::hypergraph::{hyper_branch_var, select_topk, HyperStructure};
use crate::objective::{infonce_var, sample_negatives, LossWeights, ObjectiveError, TrainTriple};
use crate::propagation::bipartite_operators;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HRCKPT01";

/// Independent ChaCha streams per purpose.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}; first triples: {triples:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        triples: Vec<(usize, usize, usize)>,
    },
    #[error("training graph has no edges")]
    EmptyTraining,
    #[error("checkpoint is corrupt: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub dim: usize,
    pub layers: usize,
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub no_sa: bool,
    pub no_dh: bool,
    pub no_ssl: bool,
    pub phi: PhiMode,
    pub activation: Activation,
    pub stare_variant: bool,
    /// Conventional InfoNCE denominator (positive included).
    pub include_positive: bool,
    /// Contrast against every instance instead of the batch.
    pub ssl_full_set: bool,
    /// Anchor joins its own hyperedge at weight 1.
    pub include_self_loops: bool,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            dim: 32,
            layers: 2,
            k: 8,
            alpha: 0.5,
            tau: 0.5,
            lambda1: 2e-4,
            lambda2: 1e-4,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 200,
            seed: 7,
            no_sa: false,
            no_dh: false,
            no_ssl: false,
            phi: PhiMode::Multiply,
            activation: Activation::Tanh,
            stare_variant: false,
            include_positive: false,
            ssl_full_set: false,
            include_self_loops: false,
            eval_every: 1,
            patience: 20,
        }
    }
}

impl TrainingConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: if self.no_ssl { 0.0 } else { self.lambda1 },
            lambda2: self.lambda2,
            tau: self.tau,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            phi: self.phi,
            activation: self.activation,
            variant: if self.stare_variant {
                EncoderVariant::Stare
            } else {
                EncoderVariant::WithHead
            },
            use_attention: !self.no_sa,
            leaky_slope: 0.2,
        }
    }
}

/// Everything the trainer reads: interactions, statements, and the
/// item-to-entity alignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub store: StatementStore,
    pub alignment: Vec<crate::data::EntityId>,
}

/// Edge holdout. The train graph keeps the full dense id space so
/// embeddings index identically across splits.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: InteractionGraph,
    pub valid: Vec<(UserId, ItemId)>,
    pub test: Vec<(UserId, ItemId)>,
}

/// 8:1:1 holdout per user. Users with fewer than 3 edges keep everything
/// in train; every user retains at least one training edge.
pub fn split_edges(graph: &InteractionGraph, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for u in 0..graph.n_users() {
        let mut items: Vec<usize> = graph.user_neighbors(UserId(u)).to_vec();
        items.shuffle(&mut rng);
        let n = items.len();
        let (n_test, n_valid) = if n >= 3 {
            ((n / 10).max(1), (n / 10).max(1))
        } else {
            (0, 0)
        };
        for (i, v) in items.into_iter().enumerate() {
            if i < n_test {
                test.push((UserId(u), ItemId(v)));
            } else if i < n_test + n_valid {
                valid.push((UserId(u), ItemId(v)));
            } else {
                train.push((u, v));
            }
        }
    }
    let train = InteractionGraph::from_dense_edges(graph.n_users(), graph.n_items(), train);
    Split { train, valid, test }
}

/// Trainable state plus optimizer moments and the epoch-loop RNG cursor.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainingConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub epoch: usize,
    pub rng_word_pos: u128,
    /// Hypergraph structures pinned at training start under `no_dh`.
    pub frozen: Option<(HyperStructure, HyperStructure)>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Xavier-uniform parameters, zero attention biases, zero moments.
pub fn init_params(data: &Dataset, config: &TrainingConfig) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_INIT);
    let d = config.dim;
    let mut params = BTreeMap::new();
    params.insert("user_emb".into(), xavier(&mut rng, data.graph.n_users(), d));
    params.insert(
        "entity_emb".into(),
        xavier(&mut rng, data.store.n_entities(), d),
    );
    params.insert(
        "relation_emb".into(),
        xavier(&mut rng, data.store.n_relations().max(1), d),
    );
    for name in ["w_query", "w_key", "w_value", "w_qual", "w_forward"] {
        params.insert(name.into(), xavier(&mut rng, d, d));
    }
    params.insert("bias_key".into(), Tensor::zeros(vec![3, d]));
    params.insert("bias_value".into(), Tensor::zeros(vec![3, d]));
    for l in 0..config.layers {
        params.insert(format!("w_hyper_item_{l}"), xavier(&mut rng, d, d));
        params.insert(format!("w_hyper_user_{l}"), xavier(&mut rng, d, d));
    }
    let zeros: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
        .collect();
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    epoch_rng.set_stream(STREAM_EPOCH);
    ModelState {
        config: config.clone(),
        params,
        adam_m: zeros.clone(),
        adam_v: zeros,
        step: 0,
        epoch: 0,
        rng_word_pos: epoch_rng.get_word_pos(),
        frozen: None,
    }
}

impl ModelState {
    pub fn encoder_params(&self) -> crate::encoder::EncoderParams {
        crate::encoder::EncoderParams {
            entity_emb: self.params["entity_emb"].clone(),
            relation_emb: self.params["relation_emb"].clone(),
            w_query: self.params["w_query"].clone(),
            w_key: self.params["w_key"].clone(),
            w_value: self.params["w_value"].clone(),
            bias_key: self.params["bias_key"].clone(),
            bias_value: self.params["bias_value"].clone(),
            w_qual: self.params["w_qual"].clone(),
            w_forward: self.params["w_forward"].clone(),
            alpha: self.config.alpha,
        }
    }

    pub fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STREAM_EPOCH);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Squared L2 norm over every parameter tensor.
    pub fn sq_norm(&self) -> f64 {
        self.params.values().map(|t| t.frobenius_sq()).sum()
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), TrainError> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a TrainingConfig,
            step: u64,
            epoch: usize,
            rng_word_pos: String,
            frozen: &'a Option<(HyperStructure, HyperStructure)>,
            tensors: Vec<&'a String>,
        }
        let header = Header {
            config: &self.config,
            step: self.step,
            epoch: self.epoch,
            rng_word_pos: self.rng_word_pos.to_string(),
            frozen: &self.frozen,
            tensors: self.params.keys().collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, p) in &self.params {
            p.write_to(w)?;
            self.adam_m[name].write_to(w)?;
            self.adam_v[name].write_to(w)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<ModelState, TrainError> {
        #[derive(Deserialize)]
        struct Header {
            config: TrainingConfig,
            step: u64,
            epoch: usize,
            rng_word_pos: String,
            frozen: Option<(HyperStructure, HyperStructure)>,
            tensors: Vec<String>,
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadCheckpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
        let rng_word_pos = header
            .rng_word_pos
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad rng cursor".into()))?;
        let mut params = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for name in header.tensors {
            params.insert(name.clone(), Tensor::read_from(r)?);
            adam_m.insert(name.clone(), Tensor::read_from(r)?);
            adam_v.insert(name, Tensor::read_from(r)?);
        }
        Ok(ModelState {
            config: header.config,
            params,
            adam_m,
            adam_v,
            step: header.step,
            epoch: header.epoch,
            rng_word_pos,
            frozen: header.frozen,
        })
    }

    pub fn save_file(&self, path: impl AsRef<std::path::Path>) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<ModelState, TrainError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ModelState::load(&mut f)
    }
}

/// Tape handles for every trainable tensor plus the layer outputs.
pub struct ForwardVars {
    pub leaves: BTreeMap<String, Var>,
    /// L+1 entries each, layer 0 first.
    pub user_layers: Vec<Var>,
    pub item_layers: Vec<Var>,
    /// L entries each: the hypergraph branch outputs per layer.
    pub user_psis: Vec<Var>,
    pub item_psis: Vec<Var>,
    pub user_final: Var,
    pub item_final: Var,
    pub encode_diag: EncodeDiagnostics,
}

fn mean_vars(tape: &Tape, vars: &[Var]) -> Result<Var, TensorError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Build the full differentiable forward computation on `tape`.
///
/// Layer 0 items come from the statement encoder, layer 0 users from the
/// free embedding table. Each layer adds the bipartite propagation output
/// and the hypergraph convolution of the same layer's embeddings; under
/// `no_dh` the structures pinned in the state at training start are used
/// at every layer instead of being rebuilt.
pub fn forward_pass(
    tape: &Tape,
    data: &Dataset,
    train: &InteractionGraph,
    state: &ModelState,
) -> Result<ForwardVars, TrainError> {
    let leaves: BTreeMap<String, Var> = state
        .params
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
        .collect();
    forward_with_leaves(tape, data, train, &state.config, leaves, state.frozen.as_ref())
}

/// Same as [`forward_pass`] but over caller-provided tape handles, so the
/// whole pipeline can sit under an external gradient probe.
pub fn forward_with_leaves(
    tape: &Tape,
    data: &Dataset,
    train: &InteractionGraph,
    config: &TrainingConfig,
    leaves: BTreeMap<String, Var>,
    pinned: Option<&(HyperStructure, HyperStructure)>,
) -> Result<ForwardVars, TrainError> {
    let enc = EncoderVars {
        entity_emb: leaves["entity_emb"],
        relation_emb: leaves["relation_emb"],
        w_query: leaves["w_query"],
        w_key: leaves["w_key"],
        w_value: leaves["w_value"],
        bias_key: leaves["bias_key"],
        bias_value: leaves["bias_value"],
        w_qual: leaves["w_qual"],
        w_forward: leaves["w_forward"],
        alpha: config.alpha,
    };
    let (item0, encode_diag) =
        encode_all_items_var(tape, &data.store, &data.alignment, &enc, &config.encoder_config())?;
    let user0 = leaves["user_emb"];
    let (user_op, item_op) = bipartite_operators(train);

    let mut user_layers = vec![user0];
    let mut item_layers = vec![item0];
    let mut user_psis = Vec::new();
    let mut item_psis = Vec::new();
    let mut frozen: Option<(HyperStructure, HyperStructure)> = pinned.cloned();
    for l in 0..config.layers {
        let zu = user_layers[l];
        let zv = item_layers[l];
        let local_u = tape.spmm(user_op.clone(), zv)?;
        let local_v = tape.spmm(item_op.clone(), zu)?;
        let (su, sv) = if config.no_dh {
            // Fall back to this pass's layer-0 structure when nothing was
            // pinned (a bare forward on a fresh state).
            if frozen.is_none() {
                frozen = Some((
                    select_topk(&tape.value(zu), config.k, config.include_self_loops),
                    select_topk(&tape.value(zv), config.k, config.include_self_loops),
                ));
            }
            frozen.clone().unwrap()
        } else {
            (
                select_topk(&tape.value(zu), config.k, config.include_self_loops),
                select_topk(&tape.value(zv), config.k, config.include_self_loops),
            )
        };
        let psi_u = hyper_branch_var(tape, zu, leaves[&format!("w_hyper_user_{l}")], &su)?;
        let psi_v = hyper_branch_var(tape, zv, leaves[&format!("w_hyper_item_{l}")], &sv)?;
        user_layers.push(tape.add(local_u, psi_u)?);
        item_layers.push(tape.add(local_v, psi_v)?);
        user_psis.push(psi_u);
        item_psis.push(psi_v);
    }
    let user_final = mean_vars(tape, &user_layers)?;
    let item_final = mean_vars(tape, &item_layers)?;
    Ok(ForwardVars {
        leaves,
        user_layers,
        item_layers,
        user_psis,
        item_psis,
        user_final,
        item_final,
        encode_diag,
    })
}

/// Pooled final representations without gradient bookkeeping.
pub fn forward_values(
    data: &Dataset,
    train: &InteractionGraph,
    state: &ModelState,
) -> Result<(Tensor, Tensor), TrainError> {
    let tape = Tape::new();
    let fwd = forward_pass(&tape, data, train, state)?;
    Ok((tape.value(fwd.user_final), tape.value(fwd.item_final)))
}

/// Per-layer embeddings (layer 0 first), both sides.
pub fn forward_layer_values(
    data: &Dataset,
    train: &InteractionGraph,
    state: &ModelState,
) -> Result<(Vec<Tensor>, Vec<Tensor>), TrainError> {
    let tape = Tape::new();
    let fwd = forward_pass(&tape, data, train, state)?;
    Ok((
        fwd.user_layers.iter().map(|&v| tape.value(v)).collect(),
        fwd.item_layers.iter().map(|&v| tape.value(v)).collect(),
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub margin: f64,
    pub lc_user: f64,
    pub lc_item: f64,
    pub batches: usize,
}

fn dedup_sorted(mut xs: Vec<usize>) -> Vec<usize> {
    xs.sort_unstable();
    xs.dedup();
    xs
}

/// The scalar objective for one batch of triples, built on `tape`.
pub fn batch_loss_var(
    tape: &Tape,
    fwd: &ForwardVars,
    triples: &[TrainTriple],
    config: &TrainingConfig,
) -> Result<(Var, Var, Var, Var), TrainError> {
    let users: Vec<usize> = triples.iter().map(|t| t.user.0).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.pos.0).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.neg.0).collect();
    let zu = tape.gather_rows(fwd.user_final, &users);
    let pos_scores = tape.rows_dot(zu, tape.gather_rows(fwd.item_final, &pos))?;
    let neg_scores = tape.rows_dot(zu, tape.gather_rows(fwd.item_final, &neg))?;
    let ones = tape.constant(Tensor::matrix(triples.len(), 1, vec![1.0; triples.len()]));
    let margin = tape.sum_all(tape.relu(tape.add(tape.sub(ones, pos_scores)?, neg_scores)?));

    let zero = tape.constant(Tensor::scalar(0.0));
    let weights = config.weights();
    let (lc_u, lc_v) = if weights.lambda1 == 0.0 {
        (zero, zero)
    } else {
        let user_global = mean_vars(tape, &fwd.user_psis)?;
        let item_global = mean_vars(tape, &fwd.item_psis)?;
        let (lu, gu, lv, gv) = if config.ssl_full_set {
            (fwd.user_final, user_global, fwd.item_final, item_global)
        } else {
            let uu = dedup_sorted(users);
            let vv = dedup_sorted(pos);
            (
                tape.gather_rows(fwd.user_final, &uu),
                tape.gather_rows(user_global, &uu),
                tape.gather_rows(fwd.item_final, &vv),
                tape.gather_rows(item_global, &vv),
            )
        };
        let side = |local: Var, global: Var| -> Result<Var, TrainError> {
            if tape.shape(local)[0] < 2 {
                Ok(zero)
            } else {
                Ok(infonce_var(tape, local, global, weights.tau, config.include_positive)?)
            }
        };
        (side(lu, gu)?, side(lv, gv)?)
    };

    let mut reg: Option<Var> = None;
    for &leaf in fwd.leaves.values() {
        let sq = tape.sum_squares(leaf);
        reg = Some(match reg {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let reg = reg.expect("at least one parameter");
    let total = tape.add(
        tape.add(margin, tape.scale(tape.add(lc_u, lc_v)?, weights.lambda1))?,
        tape.scale(reg, weights.lambda2),
    )?;
    Ok((total, margin, lc_u, lc_v))
}

fn adam_step(state: &mut ModelState, tape: &Tape, leaves: &BTreeMap<String, Var>, total: Var) {
    let grads = tape.backward(total);
    state.step += 1;
    let t = state.step as f64;
    let lr = state.config.learning_rate;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (name, &leaf) in leaves {
        let g = grads.grad(leaf);
        let m = state.adam_m.get_mut(name).unwrap();
        let v = state.adam_v.get_mut(name).unwrap();
        let p = state.params.get_mut(name).unwrap();
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p.data_mut()[i] -= update;
        }
    }
}

/// Pin the `no_dh` structures from the state's current embeddings; a
/// no-op otherwise. Runs once at training start so the frozen hypergraph
/// reflects the initial representations, never a later layer's.
pub fn ensure_frozen(data: &Dataset, state: &mut ModelState) -> Result<(), TrainError> {
    if !state.config.no_dh || state.frozen.is_some() {
        return Ok(());
    }
    let (item0, _) = crate::encoder::encode_all_items(
        &data.store,
        &data.alignment,
        &state.encoder_params(),
        &state.config.encoder_config(),
    )?;
    state.frozen = Some((
        select_topk(
            &state.params["user_emb"],
            state.config.k,
            state.config.include_self_loops,
        ),
        select_topk(&item0, state.config.k, state.config.include_self_loops),
    ));
    Ok(())
}

/// One pass over the shuffled training edges.
pub fn train_epoch(
    data: &Dataset,
    split: &Split,
    state: &mut ModelState,
) -> Result<EpochStats, TrainError> {
    if split.train.n_edges() == 0 {
        return Err(TrainError::EmptyTraining);
    }
    ensure_frozen(data, state)?;
    let mut rng = state.epoch_rng();
    let mut edges: Vec<(UserId, ItemId)> = split.train.edges().collect();
    edges.shuffle(&mut rng);
    let mut triples = Vec::with_capacity(edges.len());
    for (u, v) in edges {
        let neg = sample_negatives(&split.train, u, &mut rng)?;
        triples.push(TrainTriple { user: u, pos: v, neg });
    }
    let mut stats = EpochStats::default();
    let epoch = state.epoch;
    for (batch_idx, chunk) in triples.chunks(state.config.batch_size).enumerate() {
        let tape = Tape::new();
        let fwd = forward_pass(&tape, data, &split.train, state)?;
        let (total, margin, lc_u, lc_v) = batch_loss_var(&tape, &fwd, chunk, &state.config)?;
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: batch_idx,
                triples: chunk
                    .iter()
                    .take(8)
                    .map(|t| (t.user.0, t.pos.0, t.neg.0))
                    .collect(),
            });
        }
        stats.loss += loss;
        stats.margin += tape.value(margin).item();
        stats.lc_user += tape.value(lc_u).item();
        stats.lc_item += tape.value(lc_v).item();
        stats.batches += 1;
        let leaves = fwd.leaves.clone();
        adam_step(state, &tape, &leaves, total);
    }
    state.epoch += 1;
    state.rng_word_pos = rng.get_word_pos();
    Ok(stats)
}

/// One history.tsv row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub lc_user: f64,
    pub lc_item: f64,
    pub recall: f64,
    pub ndcg: f64,
}

pub fn history_tsv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch\tL\tL_m\tL_c_u\tL_c_v\trecall@20\tndcg@20\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
            r.epoch, r.loss, r.margin, r.lc_user, r.lc_item, r.recall, r.ndcg
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Parameters at the best validation Recall@20.
    pub best: ModelState,
    pub best_recall: f64,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

/// Run the epoch loop with periodic validation, keeping the best state by
/// Recall@20 and stopping after `patience` evaluations without
/// improvement. Validation falls back to the training edges when the
/// holdout is empty, which makes overfitting runs measurable.
pub fn train(data: &Dataset, split: &Split, mut state: ModelState) -> Result<TrainOutcome, TrainError> {
    ensure_frozen(data, &mut state)?;
    let eval_edges: &[(UserId, ItemId)] = if split.valid.is_empty() {
        &[]
    } else {
        &split.valid
    };
    let mut history = Vec::new();
    let mut best = state.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = state.epoch;
    let mut since_best = 0usize;
    let mut last_recall = 0.0;
    let mut last_ndcg = 0.0;
    while state.epoch < state.config.epochs {
        let stats = train_epoch(data, split, &mut state)?;
        let do_eval = state.config.eval_every > 0
            && (state.epoch % state.config.eval_every == 0 || state.epoch == state.config.epochs);
        if do_eval {
            let (zu, zv) = forward_values(data, &split.train, &state)?;
            let report = if eval_edges.is_empty() {
                // No mask so train items are rankable.
                let train_pairs: Vec<(UserId, ItemId)> = split.train.edges().collect();
                crate::eval::evaluate(&zu, &zv, None, &train_pairs, 20)
            } else {
                crate::eval::evaluate(&zu, &zv, Some(&split.train), eval_edges, 20)
            };
            last_recall = report.recall;
            last_ndcg = report.ndcg;
            if report.recall > best_recall {
                best_recall = report.recall;
                best = state.clone();
                best_epoch = state.epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        history.push(HistoryRow {
            epoch: state.epoch,
            loss: stats.loss,
            margin: stats.margin,
            lc_user: stats.lc_user,
            lc_item: stats.lc_item,
            recall: last_recall,
            ndcg: last_ndcg,
        });
        if do_eval && since_best >= state.config.patience {
            break;
        }
    }
    if best_recall == f64::NEG_INFINITY {
        best = state.clone();
        best_epoch = state.epoch;
        best_recall = 0.0;
    }
    Ok(TrainOutcome {
        state,
        best,
        best_recall,
        best_epoch,
        history,
    })
}
