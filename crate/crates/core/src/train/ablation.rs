//! Ablation flags and the model wiring they induce.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterWiring, TransitionKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Skip the rollout: `<elt>` follows `<slt>` directly.
    pub no_latent: bool,
    /// One shared residual MLP instead of the routed adapter.
    pub single_mlp: bool,
    /// Zero the anchor input of the router.
    pub no_anchor_routing: bool,
    /// Train stage 0, then jump straight to the final stage.
    pub no_curriculum: bool,
    pub no_shared_expert: bool,
    pub top1: bool,
    /// Zero the step embedding input of the router.
    pub no_step_embedding: bool,
}

/// Adapter wiring plus the effective number of curriculum stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub adapter: AdapterWiring,
    pub stages: usize,
}

/// Resolves flags into a concrete wiring. Router-level flags are meaningless
/// without a router, and every adapter flag is meaningless without latent
/// steps, so such combinations are rejected.
pub fn apply_ablation(flags: &AblationFlags, adapter: &AdapterConfig, stages: usize) -> Result<Wiring> {
    adapter.validate()?;
    let router_flags = [
        ("no_anchor_routing", flags.no_anchor_routing),
        ("no_shared_expert", flags.no_shared_expert),
        ("top1", flags.top1),
        ("no_step_embedding", flags.no_step_embedding),
    ];
    let set: Vec<&str> = router_flags.iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect();
    if flags.no_latent && (flags.single_mlp || !set.is_empty()) {
        return Err(Error::Config("no_latent cannot be combined with adapter ablations".into()));
    }
    if flags.single_mlp && !set.is_empty() {
        return Err(Error::Config(format!("single_mlp has no router; cannot also set {}", set.join(", "))));
    }
    let mut w = AdapterWiring::full(adapter);
    if flags.no_latent {
        w.kind = TransitionKind::None;
    } else if flags.single_mlp {
        w.kind = TransitionKind::SingleMlp;
    }
    if flags.top1 {
        w.top_k = 1;
    }
    w.shared_expert = !flags.no_shared_expert;
    w.anchor_routing = !flags.no_anchor_routing;
    w.step_embedding = !flags.no_step_embedding;
    let stages = if flags.no_curriculum { 1 } else { stages };
    if stages == 0 {
        return Err(Error::Config("at least one curriculum stage is required".into()));
    }
    Ok(Wiring { adapter: w, stages })
}
