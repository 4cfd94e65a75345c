//! Routed transition adapter applied between latent steps: an always-on
//! shared expert plus a top-k mixture of specialized experts, routed from the
//! previous latent state fused with the semantic anchor and a step embedding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{const_tensor, normal_tensor, ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub expert_count: usize,
    pub top_k: usize,
    pub dropout_rate: f64,
    /// Hidden width multiplier of every expert. Fixed at 2.
    pub expert_expansion: usize,
    /// Renormalize the selected routing weights to sum to one.
    pub renormalize: bool,
    /// Standard deviation of the router weight initialization.
    pub router_init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            expert_count: 4,
            top_k: 2,
            dropout_rate: 0.1,
            expert_expansion: 2,
            renormalize: false,
            router_init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expert_count == 0 || self.top_k == 0 || self.top_k > self.expert_count {
            return Err(Error::Config(format!(
                "need 1 <= top_k ({}) <= expert_count ({})",
                self.top_k, self.expert_count
            )));
        }
        if self.expert_expansion != 2 {
            return Err(Error::Config("expert_expansion is fixed at 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.router_init_std >= 0.0) {
            return Err(Error::Config("router_init_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    /// Shared expert plus routed specialized experts.
    Routed,
    /// One plain residual MLP, no router.
    SingleMlp,
    /// No latent steps at all.
    None,
}

/// Concrete adapter wiring after ablation flags are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterWiring {
    pub kind: TransitionKind,
    pub top_k: usize,
    pub shared_expert: bool,
    pub anchor_routing: bool,
    pub step_embedding: bool,
}

impl AdapterWiring {
    pub fn full(config: &AdapterConfig) -> Self {
        Self {
            kind: TransitionKind::Routed,
            top_k: config.top_k,
            shared_expert: true,
            anchor_routing: true,
            step_embedding: true,
        }
    }

    pub fn is_routed(&self) -> bool {
        self.kind == TransitionKind::Routed
    }
}

/// Routing outcome of one latent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub step: usize,
    /// Full distribution over specialized experts.
    pub weights: Vec<f64>,
    /// Selected expert indices, highest weight first.
    pub selected: Vec<usize>,
    /// Entries of `weights` at `selected`, not renormalized.
    pub selected_weights: Vec<f64>,
}

/// The `top_k` largest entries of `pi`; ties go to the lower index.
pub fn select_topk(step: usize, pi: &[f64], top_k: usize) -> RoutingRecord {
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(pi.len()));
    RoutingRecord {
        step,
        weights: pi.to_vec(),
        selected_weights: order.iter().map(|&m| pi[m]).collect(),
        selected: order,
    }
}

/// `(1/M) sum_m (mean_pi_m - 1/M)^2` over the mean routing distribution.
pub fn balance_loss(records: &[RoutingRecord]) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("balance loss of an empty record set".into()))?;
    let m = first.weights.len();
    let mut mean = vec![0.0; m];
    for r in records {
        if r.weights.len() != m {
            return Err(Error::Shape("routing records over different expert counts".into()));
        }
        for (a, w) in mean.iter_mut().zip(&r.weights) {
            *a += w;
        }
    }
    Ok(balance_of_mean(&mean.iter().map(|a| a / records.len() as f64).collect::<Vec<_>>()))
}

/// Balance penalty for an already averaged distribution.
pub fn balance_of_mean(mean: &[f64]) -> f64 {
    let m = mean.len() as f64;
    mean.iter().map(|p| (p - 1.0 / m).powi(2)).sum::<f64>() / m
}

/// Differentiable balance loss over `[1, M]` routing distributions.
pub fn balance_loss_var<T: Real>(tape: &mut Tape<T>, pis: &[Var]) -> Result<Var> {
    if pis.is_empty() {
        return Err(Error::InvalidArgument("balance loss of an empty record set".into()));
    }
    let m = tape.shape(pis[0]).1;
    let stacked = if pis.len() == 1 { pis[0] } else { tape.concat_rows(pis) };
    let mean = tape.mean_rows(stacked);
    let dev = tape.add_scalar(mean, -1.0 / m as f64);
    let sq = tape.mul(dev, dev);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / m as f64))
}

#[derive(Clone, Debug)]
struct Expert {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct AdaptOutput {
    pub adapted: Var,
    pub routing: Option<RoutingRecord>,
    /// Routing distribution node, for the balance loss.
    pub pi: Option<Var>,
}

/// Parameter layout of the transition adapter.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub wiring: AdapterWiring,
    pub steps: usize,
    dim: usize,
    ln_g: ParamId,
    ln_b: ParamId,
    router: Option<(ParamId, ParamId)>,
    step_emb: Option<ParamId>,
    shared: Option<Expert>,
    experts: Vec<Expert>,
}

impl Adapter {
    /// Registers only the parameters the wiring uses. Expert output
    /// projections start at zero so the adapter is initially the identity.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: &AdapterConfig,
        wiring: &AdapterWiring,
        dim: usize,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if wiring.kind == TransitionKind::None {
            return Err(Error::Config("no adapter for a wiring without latent steps".into()));
        }
        let hidden = dim * config.expert_expansion;
        let ln_g = store.add("adapter.ln.g", const_tensor(vec![1, dim], 1.0), false);
        let ln_b = store.add("adapter.ln.b", const_tensor(vec![1, dim], 0.0), false);
        let mut expert = |store: &mut ParamStore<T>, name: &str| Expert {
            w1: store.add(format!("{name}.w1"), normal_tensor(rng, vec![hidden, dim], 1.0 / (dim as f64).sqrt()), true),
            b1: store.add(format!("{name}.b1"), const_tensor(vec![1, hidden], 0.0), false),
            w2: store.add(format!("{name}.w2"), const_tensor(vec![dim, hidden], 0.0), true),
            b2: store.add(format!("{name}.b2"), const_tensor(vec![1, dim], 0.0), false),
        };
        let (shared, experts) = match wiring.kind {
            TransitionKind::SingleMlp => (Some(expert(store, "adapter.mlp")), Vec::new()),
            _ => {
                let shared = wiring.shared_expert.then(|| expert(store, "adapter.shared"));
                let experts = (0..config.expert_count).map(|m| expert(store, &format!("adapter.expert{m}"))).collect();
                (shared, experts)
            }
        };
        let (router, step_emb) = if wiring.is_routed() {
            let m = config.expert_count;
            let w = store.add("adapter.router.w", normal_tensor(rng, vec![m, 2 * dim], config.router_init_std), true);
            let b = store.add("adapter.router.b", const_tensor(vec![1, m], 0.0), false);
            let e = wiring
                .step_embedding
                .then(|| store.add("adapter.step_emb", normal_tensor(rng, vec![steps.max(1), dim], 1.0), false));
            (Some((w, b)), e)
        } else {
            (None, None)
        };
        Ok(Self { config: config.clone(), wiring: wiring.clone(), steps, dim, ln_g, ln_b, router, step_emb, shared, experts })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// Parameter ids of the router `(weight, bias)`.
    pub fn router_params(&self) -> Option<(ParamId, ParamId)> {
        self.router
    }

    /// Output projection `(w2, b2)` of specialized expert `m`, or of the
    /// shared / single expert when `m` is `None`.
    pub fn expert_output_params(&self, m: Option<usize>) -> Option<(ParamId, ParamId)> {
        let e = match m {
            Some(m) => self.experts.get(m)?,
            None => self.shared.as_ref()?,
        };
        Some((e.w2, e.b2))
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            return Err(Error::OutOfRange { what: "latent step", index: k, limit: self.steps });
        }
        Ok(())
    }

    fn router_logits<T: Real>(&self, tape: &mut Tape<T>, z_prev: Var, anchor: Var, k: usize) -> Result<Var> {
        self.check_step(k)?;
        let Some((w, b)) = self.router else {
            return Err(Error::Config("this adapter wiring has no router".into()));
        };
        let fused = if self.wiring.anchor_routing { tape.add(z_prev, anchor) } else { z_prev };
        let e = match self.step_emb {
            Some(table) => {
                let t = tape.param(table);
                tape.row(t, k - 1)
            }
            None => tape.leaf(1, self.dim, vec![T::zero(); self.dim]),
        };
        let x = tape.concat_cols(fused, e);
        let (w, b) = (tape.param(w), tape.param(b));
        let logits = tape.matmul_t(x, w);
        Ok(tape.add_row(logits, b))
    }

    /// `softmax(W_r [z_prev + c ; e_k] + b_r)`, a `[1, M]` node.
    pub fn route<T: Real>(&self, tape: &mut Tape<T>, z_prev: Var, anchor: Var, k: usize) -> Result<Var> {
        let logits = self.router_logits(tape, z_prev, anchor, k)?;
        Ok(tape.softmax_rows(logits))
    }

    fn expert<T: Real>(&self, tape: &mut Tape<T>, e: &Expert, x: Var, dropout: Option<&mut ChaCha8Rng>) -> Var {
        let (w1, b1, w2, b2) = (tape.param(e.w1), tape.param(e.b1), tape.param(e.w2), tape.param(e.b2));
        let h = tape.matmul_t(x, w1);
        let h = tape.add_row(h, b1);
        let mut h = tape.gelu(h);
        if let Some(rng) = dropout {
            let p = self.config.dropout_rate;
            if p > 0.0 {
                let keep = T::of(1.0 / (1.0 - p));
                let n = tape.shape(h).1;
                let mask = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
                let mask = tape.leaf(1, n, mask);
                h = tape.mul(h, mask);
            }
        }
        let y = tape.matmul_t(h, w2);
        tape.add_row(y, b2)
    }

    /// `z_prev + E_0(LN(z_prev)) + sum_{m in top-k} pi_m E_m(LN(z_prev))`.
    /// Dropout is applied only when an RNG is supplied (training).
    pub fn adapt<T: Real>(
        &self,
        tape: &mut Tape<T>,
        z_prev: Var,
        anchor: Var,
        k: usize,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<AdaptOutput> {
        self.check_step(k)?;
        if tape.shape(z_prev) != (1, self.dim) || tape.shape(anchor) != (1, self.dim) {
            return Err(Error::Shape("adapter inputs must be [1, D]".into()));
        }
        let (g, b) = (tape.param(self.ln_g), tape.param(self.ln_b));
        let zhat = tape.layer_norm(z_prev, g, b);
        let mut acc = z_prev;
        if let Some(e) = &self.shared {
            let y = self.expert(tape, e, zhat, dropout.as_deref_mut());
            acc = tape.add(acc, y);
        }
        if !self.wiring.is_routed() {
            return Ok(AdaptOutput { adapted: acc, routing: None, pi: None });
        }
        let logits = self.router_logits(tape, z_prev, anchor, k)?;
        let pi = tape.softmax_rows(logits);
        let weights: Vec<f64> = tape.value(pi).iter().map(|v| v.as_f64()).collect();
        let record = select_topk(k, &weights, self.wiring.top_k);
        let gate = if self.config.renormalize && !record.selected.is_empty() {
            let sub = tape.pick(logits, &record.selected);
            Some(tape.softmax_rows(sub))
        } else {
            None
        };
        for (slot, &m) in record.selected.iter().enumerate() {
            let y = self.expert(tape, &self.experts[m], zhat, dropout.as_deref_mut());
            let weighted = match gate {
                Some(gv) => tape.scale_by_elem(y, gv, slot),
                None => tape.scale_by_elem(y, pi, m),
            };
            acc = tape.add(acc, weighted);
        }
        Ok(AdaptOutput { adapted: acc, routing: Some(record), pi: Some(pi) })
    }
}
