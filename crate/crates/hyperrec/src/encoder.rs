//! Knowledge-enhanced item representations from hyper-relational
//! statements.
//!
//! A statement's qualifier pairs are first composed into single vectors,
//! the full sequence `[e_h, e_r, e_t, e_q1, ...]` is refined by
//! relation-aware self-attention, and the refined pieces are aggregated
//! into one head representation with a relation-direction projection and
//! a weighted qualifier merge. Only the forward relation direction is
//! modeled.
//!
//! All builders come in two flavors: tape-based (`*_var`) for training and
//! plain-tensor wrappers that spin up a throwaway tape, for evaluation and
//! tests.

use crate::data::{EntityId, ItemId, StatementStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interaction function between two embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    Subtract,
    #[default]
    Multiply,
    Rotate,
}

impl std::str::FromStr for PhiMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "subtract" => Ok(PhiMode::Subtract),
            "multiply" => Ok(PhiMode::Multiply),
            "rotate" => Ok(PhiMode::Rotate),
            other => Err(format!("unknown phi mode {other:?}")),
        }
    }
}

/// Final aggregator activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    LeakyRelu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// Aggregator form: the full form with the head self-term, or the
/// baseline without it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    WithHead,
    Stare,
}

impl std::str::FromStr for EncoderVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "with_head" => Ok(EncoderVariant::WithHead),
            "stare" => Ok(EncoderVariant::Stare),
            other => Err(format!("unknown encoder variant {other:?}")),
        }
    }
}

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error("rotate composition requires an even dimension, got {0}")]
    OddRotateDim(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Attention bias classes: the relation position paired with head, tail,
/// or a qualifier position. All other pairs carry zero bias.
const BIAS_CLASSES: usize = 3;

fn bias_class(i: usize, j: usize, rel_pos: usize) -> Option<usize> {
    if i == j {
        return None;
    }
    let other = if i == rel_pos {
        j
    } else if j == rel_pos {
        i
    } else {
        return None;
    };
    match other {
        0 => Some(0),
        2 => Some(1),
        _ => Some(2),
    }
}

/// Trainable encoder tensors.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub entity_emb: Tensor,
    pub relation_emb: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    /// 3 x d: bias rows for the relation-head, relation-tail and
    /// relation-qualifier pair classes.
    pub bias_key: Tensor,
    pub bias_value: Tensor,
    pub w_qual: Tensor,
    /// Forward-direction projection applied to each statement message.
    pub w_forward: Tensor,
    pub alpha: f64,
}

impl EncoderParams {
    pub fn dim(&self) -> usize {
        self.entity_emb.cols()
    }

    /// Identity projections, zero biases: useful as a neutral fixture.
    pub fn identity(n_entities: usize, n_relations: usize, d: usize, alpha: f64) -> Self {
        let eye = {
            let mut t = Tensor::zeros(vec![d, d]);
            for i in 0..d {
                t.set(i, i, 1.0);
            }
            t
        };
        EncoderParams {
            entity_emb: Tensor::zeros(vec![n_entities, d]),
            relation_emb: Tensor::zeros(vec![n_relations, d]),
            w_query: eye.clone(),
            w_key: eye.clone(),
            w_value: eye.clone(),
            bias_key: Tensor::zeros(vec![BIAS_CLASSES, d]),
            bias_value: Tensor::zeros(vec![BIAS_CLASSES, d]),
            w_qual: eye.clone(),
            w_forward: eye,
            alpha,
        }
    }

    fn on_tape(&self, tape: &Tape) -> EncoderVars {
        EncoderVars {
            entity_emb: tape.leaf(self.entity_emb.clone()),
            relation_emb: tape.leaf(self.relation_emb.clone()),
            w_query: tape.leaf(self.w_query.clone()),
            w_key: tape.leaf(self.w_key.clone()),
            w_value: tape.leaf(self.w_value.clone()),
            bias_key: tape.leaf(self.bias_key.clone()),
            bias_value: tape.leaf(self.bias_value.clone()),
            w_qual: tape.leaf(self.w_qual.clone()),
            w_forward: tape.leaf(self.w_forward.clone()),
            alpha: self.alpha,
        }
    }
}

/// Tape handles to the encoder tensors.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub entity_emb: Var,
    pub relation_emb: Var,
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub bias_key: Var,
    pub bias_value: Var,
    pub w_qual: Var,
    pub w_forward: Var,
    pub alpha: f64,
}

/// Non-trainable encoder switches.
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub phi: PhiMode,
    pub activation: Activation,
    pub variant: EncoderVariant,
    /// When false, attention is bypassed and raw embeddings feed the
    /// aggregator (the -SA ablation).
    pub use_attention: bool,
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            phi: PhiMode::Multiply,
            activation: Activation::Tanh,
            variant: EncoderVariant::WithHead,
            use_attention: true,
            leaky_slope: 0.2,
        }
    }
}

/// phi(a, b): subtract, elementwise multiply, or complex-pair rotation of
/// `a` by the phases stored at the even positions of `b`.
pub fn phi_var(tape: &Tape, a: Var, b: Var, mode: PhiMode) -> Result<Var, EncoderError> {
    match mode {
        PhiMode::Subtract => Ok(tape.sub(a, b)?),
        PhiMode::Multiply => Ok(tape.hadamard(a, b)?),
        PhiMode::Rotate => {
            let d = tape.shape(a)[1];
            if d % 2 != 0 {
                return Err(EncoderError::OddRotateDim(d));
            }
            Ok(tape.rotate_pairs(a, b)?)
        }
    }
}

/// Integrate one qualifier pair into a single vector.
pub fn compose_qualifier(
    e_qv: &Tensor,
    e_qr: &Tensor,
    mode: PhiMode,
) -> Result<Tensor, EncoderError> {
    let tape = Tape::new();
    let a = tape.leaf(e_qv.clone());
    let b = tape.leaf(e_qr.clone());
    let out = phi_var(&tape, a, b, mode)?;
    Ok(tape.value(out))
}

/// Refine a statement sequence by relation-aware self-attention.
///
/// `seq` is S x d with the relation at `rel_pos`; pairs involving the
/// relation position receive learned per-class key/value biases, all
/// other pairs carry zero bias.
pub fn attention_refine_var(
    tape: &Tape,
    seq: Var,
    rel_pos: usize,
    vars: &EncoderVars,
) -> Result<Var, EncoderError> {
    let s = tape.shape(seq)[0];
    let d = tape.shape(seq)[1];
    let queries = tape.matmul(seq, tape.transpose(vars.w_query))?;
    let keys = tape.matmul(seq, tape.transpose(vars.w_key))?;
    let values = tape.matmul(seq, tape.transpose(vars.w_value))?;

    // Per-class 0/1 masks over (i, j) pairs.
    let mut masks = Vec::with_capacity(BIAS_CLASSES);
    for c in 0..BIAS_CLASSES {
        let mut m = Tensor::zeros(vec![s, s]);
        let mut any = false;
        for i in 0..s {
            for j in 0..s {
                if bias_class(i, j, rel_pos) == Some(c) {
                    m.set(i, j, 1.0);
                    any = true;
                }
            }
        }
        masks.push(if any { Some(tape.constant(m)) } else { None });
    }

    let mut logits = tape.matmul(queries, tape.transpose(keys))?;
    if masks.iter().any(Option::is_some) {
        // Bias term per pair: q_i . a^K_{class(i,j)}.
        let key_bias = tape.matmul(queries, tape.transpose(vars.bias_key))?;
        for (c, mask) in masks.iter().enumerate() {
            if let Some(m) = mask {
                let col = tape.slice_col(key_bias, c);
                logits = tape.add(logits, tape.scale_rows(*m, col)?)?;
            }
        }
    }
    let weights = tape.softmax_rows(tape.scale(logits, 1.0 / (d as f64).sqrt()));

    let mut out = tape.matmul(weights, values)?;
    for (c, mask) in masks.iter().enumerate() {
        if let Some(m) = mask {
            // Attention mass landing on class-c pairs, per query row.
            let mass = tape.row_sums(tape.hadamard(weights, *m)?);
            let bias_row = tape.gather_rows(vars.bias_value, &[c]);
            out = tape.add(out, tape.matmul(mass, bias_row)?)?;
        }
    }
    Ok(out)
}

/// Plain wrapper: refine `seq` (rows are the S input embeddings).
pub fn relation_aware_attention(
    seq: &Tensor,
    rel_pos: usize,
    params: &EncoderParams,
) -> Result<Tensor, EncoderError> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let s = tape.leaf(seq.clone());
    let out = attention_refine_var(&tape, s, rel_pos, &vars)?;
    Ok(tape.value(out))
}

/// x_qs = W_q * sum of qualifier vectors; the empty list yields zero.
pub fn merge_qualifiers_var(
    tape: &Tape,
    qual_rows: Option<Var>,
    w_qual: Var,
    d: usize,
) -> Result<Var, EncoderError> {
    match qual_rows {
        None => Ok(tape.constant(Tensor::zeros(vec![1, d]))),
        Some(rows) => Ok(tape.matmul(tape.sum_rows(rows), tape.transpose(w_qual))?),
    }
}

pub fn merge_qualifiers(quals: &[Tensor], w_qual: &Tensor) -> Result<Tensor, EncoderError> {
    let tape = Tape::new();
    let w = tape.leaf(w_qual.clone());
    let rows = if quals.is_empty() {
        None
    } else {
        let vars: Vec<Var> = quals.iter().map(|q| tape.leaf(q.clone())).collect();
        Some(tape.concat_rows(&vars)?)
    };
    let out = merge_qualifiers_var(&tape, rows, w, w_qual.cols())?;
    Ok(tape.value(out))
}

/// alpha * x_r + (1 - alpha) * x_qs.
pub fn gamma_mix_var(tape: &Tape, x_r: Var, x_qs: Var, alpha: f64) -> Result<Var, EncoderError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
    Ok(tape.add(tape.scale(x_r, alpha), tape.scale(x_qs, 1.0 - alpha))?)
}

pub fn gamma_mix(x_r: &Tensor, x_qs: &Tensor, alpha: f64) -> Result<Tensor, EncoderError> {
    let tape = Tape::new();
    let out = gamma_mix_var(&tape, tape.leaf(x_r.clone()), tape.leaf(x_qs.clone()), alpha)?;
    Ok(tape.value(out))
}

fn activate(tape: &Tape, x: Var, cfg: &EncoderConfig) -> Var {
    match cfg.activation {
        Activation::Tanh => tape.tanh(x),
        Activation::LeakyRelu => tape.leaky_relu(x, cfg.leaky_slope),
        Activation::Identity => x,
    }
}

/// Aggregate every statement headed at `h` into one representation.
///
/// An entity with no statements falls back to its raw embedding; callers
/// can detect that through [`EncodeDiagnostics`].
pub fn aggregate_head_var(
    tape: &Tape,
    h: EntityId,
    store: &StatementStore,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<Var, EncoderError> {
    let statements = store.statements_for_head(h);
    if statements.is_empty() {
        return Ok(tape.gather_rows(vars.entity_emb, &[h.0]));
    }
    let d = tape.shape(vars.entity_emb)[1];
    let mut head_terms = Vec::with_capacity(statements.len());
    let mut message_sum: Option<Var> = None;
    for st in &statements {
        let e_h = tape.gather_rows(vars.entity_emb, &[st.head.0]);
        let e_r = tape.gather_rows(vars.relation_emb, &[st.relation.0]);
        let e_t = tape.gather_rows(vars.entity_emb, &[st.tail.0]);
        let mut rows = vec![e_h, e_r, e_t];
        for (qr, qv) in &st.qualifiers {
            let e_qv = tape.gather_rows(vars.entity_emb, &[qv.0]);
            let e_qr = tape.gather_rows(vars.relation_emb, &[qr.0]);
            rows.push(phi_var(tape, e_qv, e_qr, cfg.phi)?);
        }
        let seq = tape.concat_rows(&rows)?;
        let refined = if cfg.use_attention {
            attention_refine_var(tape, seq, 1, vars)?
        } else {
            seq
        };
        head_terms.push(tape.gather_rows(refined, &[0]));
        let x_r = tape.gather_rows(refined, &[1]);
        let x_t = tape.gather_rows(refined, &[2]);
        let qual_rows = if st.qualifiers.is_empty() {
            None
        } else {
            let idx: Vec<usize> = (3..3 + st.qualifiers.len()).collect();
            Some(tape.gather_rows(refined, &idx))
        };
        let x_qs = merge_qualifiers_var(tape, qual_rows, vars.w_qual, d)?;
        let mixed = gamma_mix_var(tape, x_r, x_qs, vars.alpha)?;
        let message = phi_var(tape, x_t, mixed, cfg.phi)?;
        let projected = tape.matmul(message, tape.transpose(vars.w_forward))?;
        message_sum = Some(match message_sum {
            Some(acc) => tape.add(acc, projected)?,
            None => projected,
        });
    }
    let messages = message_sum.expect("at least one statement");
    let pre = match cfg.variant {
        EncoderVariant::WithHead => {
            let head_mean = tape.mean_rows(tape.concat_rows(&head_terms)?);
            tape.add(head_mean, messages)?
        }
        EncoderVariant::Stare => messages,
    };
    Ok(activate(tape, pre, cfg))
}

pub fn aggregate_head(
    h: EntityId,
    store: &StatementStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<Tensor, EncoderError> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let out = aggregate_head_var(&tape, h, store, &vars, cfg)?;
    Ok(tape.value(out))
}

/// Items that fell back to raw embeddings because their entity heads no
/// statements.
#[derive(Debug, Clone, Default)]
pub struct EncodeDiagnostics {
    pub isolated_items: Vec<ItemId>,
}

/// Encode every item through its aligned entity: row v of the output is
/// the aggregated representation of `alignment[v]`.
pub fn encode_all_items_var(
    tape: &Tape,
    store: &StatementStore,
    alignment: &[EntityId],
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<(Var, EncodeDiagnostics), EncoderError> {
    let mut diag = EncodeDiagnostics::default();
    let mut rows = Vec::with_capacity(alignment.len());
    for (v, &entity) in alignment.iter().enumerate() {
        if store.statements_for_head(entity).is_empty() {
            diag.isolated_items.push(ItemId(v));
        }
        rows.push(aggregate_head_var(tape, entity, store, vars, cfg)?);
    }
    let table = tape.concat_rows(&rows)?;
    Ok((table, diag))
}

pub fn encode_all_items(
    store: &StatementStore,
    alignment: &[EntityId],
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<(Tensor, EncodeDiagnostics), EncoderError> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let (table, diag) = encode_all_items_var(&tape, store, alignment, &vars, cfg)?;
    Ok((tape.value(table), diag))
}
