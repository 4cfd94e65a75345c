//! Decoder-only causal transformer with rotary positions, feature injection
//! and an append-only per-layer KV cache.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::scene::Modality;
use crate::error::{Error, Result};
use crate::params::{const_tensor, normal_tensor, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vocab::SpecialTokens;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPlacement {
    /// `... content question <anchor> <slt>`
    #[default]
    BeforeSlt,
    /// `... content <anchor> question <slt>`
    AfterContent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub mlp_expansion: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rotary_base: f64,
    pub latent_steps: usize,
    pub anchor_placement: AnchorPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            layer_count: 4,
            head_count: 4,
            mlp_expansion: 4,
            vocab_size: crate::vocab::Vocab::standard().len(),
            max_position: 512,
            rotary_base: 10_000.0,
            latent_steps: 8,
            anchor_placement: AnchorPlacement::BeforeSlt,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("hidden_dim", self.hidden_dim),
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
            ("mlp_expansion", self.mlp_expansion),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if !(self.hidden_dim / self.head_count).is_multiple_of(2) {
            return Err(Error::Config("rotary encoding needs an even head width".into()));
        }
        if !(self.rotary_base > 1.0) {
            return Err(Error::Config("rotary_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.head_count
    }
}

/// One prefix element: a token or a block of raw feature cells, each cell
/// occupying one position after projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Element {
    Token(usize),
    Features { modality: Modality, cells: Tensor<f32> },
}

impl Element {
    pub fn width(&self) -> usize {
        match self {
            Element::Token(_) => 1,
            Element::Features { cells, .. } => cells.rows(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultimodalSequence {
    pub elements: Vec<Element>,
}

impl MultimodalSequence {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.iter().map(Element::width).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Absolute positions of every occurrence of `token`.
    pub fn token_positions(&self, token: usize) -> Vec<usize> {
        let mut pos = 0;
        let mut out = Vec::new();
        for e in &self.elements {
            if *e == Element::Token(token) {
                out.push(pos);
            }
            pos += e.width();
        }
        out
    }

    /// Checks the prefix contract and returns `(anchor, slt)` positions: one
    /// anchor, one slt as the final element, features only before slt.
    pub fn validate_prefix(&self, special: &SpecialTokens) -> Result<(usize, usize)> {
        let anchors = self.token_positions(special.anchor_id);
        let slts = self.token_positions(special.slt_id);
        if anchors.len() != 1 {
            return Err(Error::Sequence(format!("expected one <anchor>, found {}", anchors.len())));
        }
        if slts.len() != 1 {
            return Err(Error::Sequence(format!("expected one <slt>, found {}", slts.len())));
        }
        let (a, s) = (anchors[0], slts[0]);
        if a >= s {
            return Err(Error::Sequence("<slt> must follow <anchor>".into()));
        }
        if s + 1 != self.len() {
            return Err(Error::Sequence("<slt> must close the prefix".into()));
        }
        Ok((a, s))
    }
}

/// Per-layer key/value segments. Segments are never modified once appended.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self { keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    /// Positions filled (identical across layers).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn segments(&self, layer: usize) -> (&[Var], &[Var]) {
        (&self.keys[layer], &self.values[layer])
    }
}

pub struct PrefixOutput {
    pub h_slt: Var,
    /// Raw final hidden state at `<anchor>`.
    pub anchor_state: Var,
    pub cache: KvCache,
    pub prefix_length: usize,
    pub anchor_position: usize,
    pub slt_position: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter layout of the backbone; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub special: SpecialTokens,
    tok_emb: ParamId,
    features: [Option<(ParamId, ParamId)>; 4],
    blocks: Vec<Block>,
    final_g: ParamId,
    final_b: ParamId,
    lm_head: ParamId,
}

/// Result of greedy decoding: emitted tokens and the hidden state of the last
/// fed position.
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub last_hidden: Var,
}

impl Backbone {
    /// Registers freshly initialized parameters: token embeddings `N(0, 1)`,
    /// weight matrices `N(0, 1/fan_in)`, gains 1, biases 0.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        special: SpecialTokens,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        special.validate(config.vocab_size)?;
        let d = config.hidden_dim;
        let hidden = d * config.mlp_expansion;
        let tok_emb = store.add("backbone.tok_emb", normal_tensor(rng, vec![config.vocab_size, d], 1.0), true);
        let mut mat = |store: &mut ParamStore<T>, name: String, out: usize, inp: usize| {
            store.add(name, normal_tensor(rng, vec![out, inp], 1.0 / (inp as f64).sqrt()), true)
        };
        let features = Modality::ALL.map(|m| {
            m.cell_dim().map(|dim| {
                let w = mat(store, format!("backbone.feat.{m}.w"), d, dim);
                let b = store.add(format!("backbone.feat.{m}.b"), const_tensor(vec![1, d], 0.0), false);
                (w, b)
            })
        });
        let mut blocks = Vec::with_capacity(config.layer_count);
        for l in 0..config.layer_count {
            let p = format!("backbone.layer{l}");
            let ln1_g = store.add(format!("{p}.ln1.g"), const_tensor(vec![1, d], 1.0), false);
            let ln1_b = store.add(format!("{p}.ln1.b"), const_tensor(vec![1, d], 0.0), false);
            let wq = mat(store, format!("{p}.attn.wq"), d, d);
            let wk = mat(store, format!("{p}.attn.wk"), d, d);
            let wv = mat(store, format!("{p}.attn.wv"), d, d);
            let wo = mat(store, format!("{p}.attn.wo"), d, d);
            let ln2_g = store.add(format!("{p}.ln2.g"), const_tensor(vec![1, d], 1.0), false);
            let ln2_b = store.add(format!("{p}.ln2.b"), const_tensor(vec![1, d], 0.0), false);
            let w1 = mat(store, format!("{p}.mlp.w1"), hidden, d);
            let b1 = store.add(format!("{p}.mlp.b1"), const_tensor(vec![1, hidden], 0.0), false);
            let w2 = mat(store, format!("{p}.mlp.w2"), d, hidden);
            let b2 = store.add(format!("{p}.mlp.b2"), const_tensor(vec![1, d], 0.0), false);
            blocks.push(Block { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        let final_g = store.add("backbone.final.g", const_tensor(vec![1, d], 1.0), false);
        let final_b = store.add("backbone.final.b", const_tensor(vec![1, d], 0.0), false);
        let lm_head = mat(store, "backbone.lm_head".into(), config.vocab_size, d);
        Ok(Self { config: config.clone(), special, tok_emb, features, blocks, final_g, final_b, lm_head })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.blocks.len())
    }

    pub fn token_embedding_param(&self) -> ParamId {
        self.tok_emb
    }

    /// Projection `(weight, bias)` of a feature modality.
    pub fn feature_params(&self, modality: Modality) -> Option<(ParamId, ParamId)> {
        self.features[modality.index()]
    }

    pub fn embed_token<T: Real>(&self, tape: &mut Tape<T>, id: usize) -> Result<Var> {
        self.embed_tokens(tape, &[id])
    }

    pub fn embed_tokens<T: Real>(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::OutOfRange { what: "token id", index: bad, limit: self.config.vocab_size });
        }
        let table = tape.param(self.tok_emb);
        Ok(tape.gather(table, ids))
    }

    /// Projects raw feature cells `[n, cell_dim]` to `[n, D]` prefix vectors.
    pub fn inject_features<T: Real>(&self, tape: &mut Tape<T>, modality: Modality, cells: &Tensor<f32>) -> Result<Var> {
        let Some((w, b)) = self.features[modality.index()] else {
            return Err(Error::Schema(format!("{modality} payloads carry no feature cells")));
        };
        let dim = modality.cell_dim().expect("feature modality");
        if cells.shape().len() != 2 || cells.cols() != dim {
            return Err(Error::Schema(format!(
                "{modality} cells must be [n, {dim}], got {:?}",
                cells.shape()
            )));
        }
        let x = tape.leaf(cells.rows(), dim, cells.data().iter().map(|v| T::of(*v as f64)).collect());
        let (w, b) = (tape.param(w), tape.param(b));
        let y = tape.matmul_t(x, w);
        Ok(tape.add_row(y, b))
    }

    /// Input vectors `[len, D]` for every position of `seq`.
    pub fn embed_sequence<T: Real>(&self, tape: &mut Tape<T>, seq: &MultimodalSequence) -> Result<Var> {
        let mut parts = Vec::new();
        let mut run = Vec::new();
        for e in &seq.elements {
            match e {
                Element::Token(id) => run.push(*id),
                Element::Features { modality, cells } => {
                    if !run.is_empty() {
                        parts.push(self.embed_tokens(tape, &run)?);
                        run.clear();
                    }
                    parts.push(self.inject_features(tape, *modality, cells)?);
                }
            }
        }
        if !run.is_empty() {
            parts.push(self.embed_tokens(tape, &run)?);
        }
        if parts.is_empty() {
            return Err(Error::Sequence("empty sequence".into()));
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) })
    }

    /// Runs `inputs` (`[n, D]`) at positions `cache.len()..cache.len()+n`,
    /// appending one key/value segment per layer. Returns the final-norm
    /// hidden states `[n, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, inputs: Var, cache: &mut KvCache) -> Result<Var> {
        let (n, d) = tape.shape(inputs);
        if d != self.config.hidden_dim {
            return Err(Error::Shape(format!("input width {d}, model width {}", self.config.hidden_dim)));
        }
        if cache.layers() != self.blocks.len() {
            return Err(Error::Shape("cache built for a different layer count".into()));
        }
        let start = cache.len;
        if start + n > self.config.max_position {
            return Err(Error::OutOfRange {
                what: "position",
                index: start + n - 1,
                limit: self.config.max_position,
            });
        }
        let heads = self.config.head_count;
        let base = self.config.rotary_base;
        let mut x = inputs;
        for (l, b) in self.blocks.iter().enumerate() {
            let (g1, b1) = (tape.param(b.ln1_g), tape.param(b.ln1_b));
            let h = tape.layer_norm(x, g1, b1);
            let (wq, wk, wv, wo) = (tape.param(b.wq), tape.param(b.wk), tape.param(b.wv), tape.param(b.wo));
            let q = tape.matmul_t(h, wq);
            let k = tape.matmul_t(h, wk);
            let v = tape.matmul_t(h, wv);
            let q = tape.rotary(q, start, heads, base);
            let k = tape.rotary(k, start, heads, base);
            cache.keys[l].push(k);
            cache.values[l].push(v);
            let a = tape.attention(q, &cache.keys[l], &cache.values[l], heads, start);
            let a = tape.matmul_t(a, wo);
            x = tape.add(x, a);
            let (g2, bb2) = (tape.param(b.ln2_g), tape.param(b.ln2_b));
            let h = tape.layer_norm(x, g2, bb2);
            let (w1, bias1, w2, bias2) = (tape.param(b.w1), tape.param(b.b1), tape.param(b.w2), tape.param(b.b2));
            let m = tape.matmul_t(h, w1);
            let m = tape.add_row(m, bias1);
            let m = tape.gelu(m);
            let m = tape.matmul_t(m, w2);
            let m = tape.add_row(m, bias2);
            x = tape.add(x, m);
        }
        cache.len += n;
        let (fg, fb) = (tape.param(self.final_g), tape.param(self.final_b));
        Ok(tape.layer_norm(x, fg, fb))
    }

    /// Full causal forward over a validated prefix.
    pub fn encode_prefix<T: Real>(&self, tape: &mut Tape<T>, seq: &MultimodalSequence) -> Result<PrefixOutput> {
        let (anchor_position, slt_position) = seq.validate_prefix(&self.special)?;
        let len = seq.len();
        if len > self.config.max_position {
            return Err(Error::OutOfRange { what: "prefix length", index: len, limit: self.config.max_position });
        }
        let inputs = self.embed_sequence(tape, seq)?;
        let mut cache = self.new_cache();
        let hidden = self.forward(tape, inputs, &mut cache)?;
        let h_slt = tape.row(hidden, slt_position);
        let anchor_state = tape.row(hidden, anchor_position);
        Ok(PrefixOutput { h_slt, anchor_state, cache, prefix_length: len, anchor_position, slt_position })
    }

    /// One position: `input` (`[1, D]`) must land at `position == cache.len()`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, input: Var, cache: &mut KvCache, position: usize) -> Result<Var> {
        if position != cache.len {
            return Err(Error::Position { cache_len: cache.len, requested: position });
        }
        if tape.shape(input) != (1, self.config.hidden_dim) {
            return Err(Error::Shape(format!("step input {:?}", tape.shape(input))));
        }
        self.forward(tape, input, cache)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, hidden: Var) -> Var {
        let w = tape.param(self.lm_head);
        tape.matmul_t(hidden, w)
    }

    /// Greedy argmax decoding from `last_hidden`; each emitted token is fed
    /// back into the cache. Stops after emitting `stop` or `max_len` tokens.
    /// Ties go to the lower token id.
    pub fn decode_greedy<T: Real>(
        &self,
        tape: &mut Tape<T>,
        cache: &mut KvCache,
        last_hidden: Var,
        max_len: usize,
        stop: Option<usize>,
    ) -> Result<Decoded> {
        let mut tokens = Vec::new();
        let mut hidden = last_hidden;
        while tokens.len() < max_len {
            let logits = self.logits(tape, hidden);
            let next = argmax(tape.value(logits));
            tokens.push(next);
            let e = self.embed_token(tape, next)?;
            let pos = cache.len;
            hidden = self.step(tape, e, cache, pos)?;
            if Some(next) == stop {
                break;
            }
        }
        Ok(Decoded { tokens, last_hidden: hidden })
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{Grid, Object, SceneSpec};
    use crate::vocab::Vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> (ParamStore<f64>, Backbone) {
        let config = ModelConfig {
            hidden_dim: 16,
            layer_count: 2,
            head_count: 2,
            mlp_expansion: 2,
            max_position: 64,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::register(&mut store, &config, Vocab::standard().special(), &mut rng).unwrap();
        (store, bb)
    }

    fn prefix(bb: &Backbone, body: &[usize]) -> MultimodalSequence {
        let mut e: Vec<Element> = body.iter().map(|t| Element::Token(*t)).collect();
        e.push(Element::Token(bb.special.anchor_id));
        e.push(Element::Token(bb.special.slt_id));
        MultimodalSequence::new(e)
    }

    #[test]
    fn prefix_then_step_matches_full_forward() {
        let (store, bb) = tiny(1);
        let seq = prefix(&bb, &[20, 21, 30, 41, 7]);
        let mut tape = Tape::new(&store);
        let mut out = bb.encode_prefix(&mut tape, &seq).unwrap();
        assert_eq!(out.cache.len(), seq.len());
        let e = bb.embed_token(&mut tape, 33).unwrap();
        let h = bb.step(&mut tape, e, &mut out.cache, seq.len()).unwrap();
        assert_eq!(out.cache.len(), seq.len() + 1);

        let inputs = bb.embed_sequence(&mut tape, &seq).unwrap();
        let all = tape.concat_rows(&[inputs, e]);
        let mut fresh = bb.new_cache();
        let full = bb.forward(&mut tape, all, &mut fresh).unwrap();
        let last = tape.row(full, seq.len());
        let slt = tape.row(full, seq.len() - 1);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(tape.value(h), tape.value(last)) < 1e-5);
        assert!(diff(tape.value(out.h_slt), tape.value(slt)) < 1e-5);
    }

    #[test]
    fn token_by_token_matches_full_forward() {
        let (store, bb) = tiny(2);
        let ids = [10, 40, 22, 9, 51, 3];
        let mut tape = Tape::new(&store);
        let mut cache = bb.new_cache();
        let mut stepped = Vec::new();
        for (p, id) in ids.iter().enumerate() {
            let e = bb.embed_token(&mut tape, *id).unwrap();
            stepped.push(bb.step(&mut tape, e, &mut cache, p).unwrap());
        }
        let all = bb.embed_tokens(&mut tape, &ids).unwrap();
        let full = bb.forward(&mut tape, all, &mut bb.new_cache()).unwrap();
        for (p, h) in stepped.iter().enumerate() {
            let row = &tape.value(full)[p * 16..(p + 1) * 16];
            for (a, b) in tape.value(*h).iter().zip(row) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stale_position_rejected() {
        let (store, bb) = tiny(3);
        let mut tape = Tape::new(&store);
        let mut cache = bb.new_cache();
        let e = bb.embed_token(&mut tape, 5).unwrap();
        bb.step(&mut tape, e, &mut cache, 0).unwrap();
        assert!(matches!(
            bb.step(&mut tape, e, &mut cache, 0),
            Err(Error::Position { cache_len: 1, requested: 0 })
        ));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn later_positions_do_not_affect_earlier_states() {
        let (store, bb) = tiny(4);
        let mut tape = Tape::new(&store);
        let a = bb.embed_tokens(&mut tape, &[11, 12, 13, 14]).unwrap();
        let b = bb.embed_tokens(&mut tape, &[11, 12, 60, 61]).unwrap();
        let ha = bb.forward(&mut tape, a, &mut bb.new_cache()).unwrap();
        let hb = bb.forward(&mut tape, b, &mut bb.new_cache()).unwrap();
        assert_eq!(&tape.value(ha)[..32], &tape.value(hb)[..32]);
        assert_ne!(&tape.value(ha)[32..48], &tape.value(hb)[32..48]);
    }

    #[test]
    fn anchor_state_ignores_tokens_after_anchor() {
        let (store, bb) = tiny(5);
        let sp = bb.special;
        let mk = |q: usize| {
            MultimodalSequence::new(vec![
                Element::Token(20),
                Element::Token(sp.anchor_id),
                Element::Token(q),
                Element::Token(sp.slt_id),
            ])
        };
        let mut tape = Tape::new(&store);
        let a = bb.encode_prefix(&mut tape, &mk(30)).unwrap();
        let b = bb.encode_prefix(&mut tape, &mk(31)).unwrap();
        assert_eq!(tape.value(a.anchor_state), tape.value(b.anchor_state));
        assert_ne!(tape.value(a.h_slt), tape.value(b.h_slt));
    }

    #[test]
    fn prefix_contract_errors() {
        let (store, bb) = tiny(6);
        let mut tape = Tape::new(&store);
        let no_anchor = MultimodalSequence::new(vec![Element::Token(20), Element::Token(bb.special.slt_id)]);
        assert!(bb.encode_prefix(&mut tape, &no_anchor).is_err());
        let long = prefix(&bb, &vec![20; 70]);
        assert!(bb.encode_prefix(&mut tape, &long).is_err());
        assert!(bb.embed_token(&mut tape, 10_000).is_err());
    }

    #[test]
    fn image_payload_injects_36_vectors() {
        let (mut store, bb) = tiny(7);
        let mut g = Grid::empty();
        g.set(0, 0, Some(Object { color: 0, shape: 1 }));
        let cells = SceneSpec::Img { grid: g }.raw_features().unwrap();
        let mut tape = Tape::new(&store);
        let v = bb.inject_features(&mut tape, Modality::Img, &cells).unwrap();
        assert_eq!(tape.shape(v), (36, 16));
        assert!(bb.inject_features(&mut tape, Modality::Doc, &cells).is_err());
        assert!(bb.inject_features(&mut tape, Modality::Txt, &cells).is_err());
        drop(tape);

        let (_, b) = bb.feature_params(Modality::Img).unwrap();
        store.get_mut(b).data_mut().fill(0.0);
        let zeros = Tensor::zeros(vec![36, crate::data::scene::IMG_CELL_DIM]);
        let mut tape = Tape::new(&store);
        let v = bb.inject_features(&mut tape, Modality::Img, &zeros).unwrap();
        assert!(tape.value(v).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn greedy_decoding() {
        let (store, bb) = tiny(8);
        let seq = prefix(&bb, &[20, 21]);
        let run = |max_len| {
            let mut tape = Tape::new(&store);
            let mut p = bb.encode_prefix(&mut tape, &seq).unwrap();
            let d = bb.decode_greedy(&mut tape, &mut p.cache, p.h_slt, max_len, None).unwrap();
            assert_eq!(p.cache.len(), seq.len() + d.tokens.len());
            d.tokens
        };
        assert!(run(0).is_empty());
        assert_eq!(run(5), run(5));
        assert_eq!(run(5).len(), 5);
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.validate().unwrap();
        c.head_count = 3;
        assert!(c.validate().is_err());
        c = ModelConfig { layer_count: 0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
