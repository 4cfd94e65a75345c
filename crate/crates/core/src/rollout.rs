//! Latent rollout over the KV cache, block closure and embedding extraction.

use rand_chacha::ChaCha8Rng;

use crate::adapter::RoutingRecord;
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, MultimodalSequence, PrefixOutput};
use crate::data::SerializedSequence;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

pub struct LatentTrace {
    pub z0: Var,
    /// `z(1)..z(K)`.
    pub latent_states: Vec<Var>,
    /// Adapter outputs fed at each latent position.
    pub adapted_states: Vec<Var>,
    pub routing: Vec<RoutingRecord>,
    /// Routing distributions as tape nodes, one per routed step.
    pub routing_vars: Vec<Var>,
    /// Absolute cache position of each `z(k)`.
    pub positions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Train,
    Infer,
}

pub struct EmbeddingPair {
    pub e_gen: Var,
    /// Present only in training mode.
    pub e_anc: Option<Var>,
}

/// `z(0)`: the hidden state at `<slt>`, unmodified.
pub fn init_latent(prefix: &PrefixOutput) -> Var {
    prefix.h_slt
}

/// Runs `steps` adapted backbone steps: `z(k) = step(adapt(z(k-1), c, k))`
/// at position `p_slt + k`. Grows the cache by exactly `steps`.
pub fn rollout<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    prefix: &mut PrefixOutput,
    steps: usize,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LatentTrace> {
    if prefix.cache.len() != prefix.prefix_length {
        return Err(Error::Position { cache_len: prefix.cache.len(), requested: prefix.prefix_length });
    }
    let z0 = init_latent(prefix);
    let mut trace = LatentTrace {
        z0,
        latent_states: Vec::with_capacity(steps),
        adapted_states: Vec::with_capacity(steps),
        routing: Vec::new(),
        routing_vars: Vec::new(),
        positions: Vec::with_capacity(steps),
    };
    if steps == 0 {
        return Ok(trace);
    }
    let adapter = model
        .adapter
        .as_ref()
        .ok_or_else(|| Error::Config("latent steps requested from a model without an adapter".into()))?;
    let mut z = z0;
    for k in 1..=steps {
        let out = adapter.adapt(tape, z, prefix.anchor_state, k, dropout.as_deref_mut())?;
        let position = prefix.slt_position + k;
        z = model.backbone.step(tape, out.adapted, &mut prefix.cache, position)?;
        trace.adapted_states.push(out.adapted);
        trace.latent_states.push(z);
        trace.positions.push(position);
        if let (Some(r), Some(pi)) = (out.routing, out.pi) {
            trace.routing.push(r);
            trace.routing_vars.push(pi);
        }
    }
    Ok(trace)
}

/// Feeds `<elt>` then `<gen>` and reads the embeddings.
pub fn extract_embeddings<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone,
    prefix: &mut PrefixOutput,
    mode: EmbedMode,
) -> Result<EmbeddingPair> {
    let sp = backbone.special;
    let inputs = backbone.embed_tokens(tape, &[sp.elt_id, sp.gen_id])?;
    let hidden = backbone.forward(tape, inputs, &mut prefix.cache)?;
    let gen = tape.row(hidden, 1);
    Ok(embeddings_from(tape, gen, prefix.anchor_state, mode))
}

fn embeddings_from<T: Real>(tape: &mut Tape<T>, gen_hidden: Var, anchor: Var, mode: EmbedMode) -> EmbeddingPair {
    let e_gen = tape.l2_normalize_rows(gen_hidden);
    let e_anc = (mode == EmbedMode::Train).then(|| tape.l2_normalize_rows(anchor));
    EmbeddingPair { e_gen, e_anc }
}

pub struct Encoded {
    pub embeddings: EmbeddingPair,
    pub trace: LatentTrace,
    /// Summed cross-entropy over supervised suffix tokens, if any.
    pub ce_sum: Option<Var>,
    pub ce_count: usize,
    pub prefix_length: usize,
}

/// Full pipeline for one serialized sequence: prefix encoding, latent
/// rollout over `latent_slots` positions, then the suffix block. Each
/// supervised suffix token is predicted from the hidden state before it.
pub fn encode_serialized<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    seq: &SerializedSequence,
    mode: EmbedMode,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Encoded> {
    let sp = model.backbone.special;
    if seq.suffix.first() != Some(&sp.elt_id) || seq.suffix.last() != Some(&sp.gen_id) || seq.suffix.len() < 2 {
        return Err(Error::Sequence("suffix must run from <elt> to <gen>".into()));
    }
    if seq.supervised.len() != seq.suffix.len() {
        return Err(Error::Sequence("supervision mask and suffix differ in length".into()));
    }
    if seq.latent_slots > model.latent_steps() {
        return Err(Error::Sequence(format!(
            "{} latent slots but the model supports {}",
            seq.latent_slots,
            model.latent_steps()
        )));
    }
    let mut prefix = model.backbone.encode_prefix(tape, &seq.prefix)?;
    let prefix_length = prefix.prefix_length;
    let trace = rollout(tape, model, &mut prefix, seq.latent_slots, dropout)?;
    let inputs = model.backbone.embed_tokens(tape, &seq.suffix)?;
    let hidden = model.backbone.forward(tape, inputs, &mut prefix.cache)?;
    let n = seq.suffix.len();
    let targets: Vec<Option<usize>> = (1..n).map(|i| seq.supervised[i].then_some(seq.suffix[i])).collect();
    let ce_count = targets.iter().flatten().count();
    let ce_sum = if ce_count > 0 {
        let before = tape.slice_rows(hidden, 0, n - 1);
        let logits = model.backbone.logits(tape, before);
        Some(tape.cross_entropy_sum(logits, &targets))
    } else {
        None
    };
    let gen = tape.row(hidden, n - 1);
    let embeddings = embeddings_from(tape, gen, prefix.anchor_state, mode);
    Ok(Encoded { embeddings, trace, ce_sum, ce_count, prefix_length })
}

/// Inference embedding of a prefix with `steps` latent positions.
pub fn embed_prefix<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    prefix_seq: &MultimodalSequence,
    steps: usize,
) -> Result<(EmbeddingPair, LatentTrace)> {
    let mut prefix = model.backbone.encode_prefix(tape, prefix_seq)?;
    let trace = rollout(tape, model, &mut prefix, steps, None)?;
    let emb = extract_embeddings(tape, &model.backbone, &mut prefix, EmbedMode::Infer)?;
    Ok((emb, trace))
}

pub struct ExplicitOutput {
    pub e_gen: Var,
    pub tokens: Vec<usize>,
    /// Reasoning forward passes, one per decoded token.
    pub tokens_generated: usize,
}

/// Explicit chain-of-thought embedding: feed `<elt>`, decode greedily until
/// `stop` is emitted or `max_rationale_len` tokens, then feed `<gen>` and
/// embed from its hidden state. `stop = None` decodes exactly
/// `max_rationale_len` tokens.
pub fn explicit_cot_embed<T: Real>(
    tape: &mut Tape<T>,
    backbone: &Backbone,
    prefix: &mut PrefixOutput,
    max_rationale_len: usize,
    stop: Option<usize>,
) -> Result<ExplicitOutput> {
    let sp = backbone.special;
    let elt = backbone.embed_token(tape, sp.elt_id)?;
    let pos = prefix.cache.len();
    let h = backbone.step(tape, elt, &mut prefix.cache, pos)?;
    let decoded = backbone.decode_greedy(tape, &mut prefix.cache, h, max_rationale_len, stop)?;
    let g = backbone.embed_token(tape, sp.gen_id)?;
    let pos = prefix.cache.len();
    let gen_hidden = backbone.step(tape, g, &mut prefix.cache, pos)?;
    let e_gen = tape.l2_normalize_rows(gen_hidden);
    let tokens_generated = decoded.tokens.len();
    Ok(ExplicitOutput { e_gen, tokens: decoded.tokens, tokens_generated })
}
