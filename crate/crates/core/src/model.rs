//! Backbone plus transition adapter, wired according to the ablation flags.

use rand::Rng;

use crate::adapter::{Adapter, AdapterConfig, AdapterWiring, TransitionKind};
use crate::backbone::{Backbone, ModelConfig};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::vocab::SpecialTokens;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub adapter: Option<Adapter>,
    pub wiring: AdapterWiring,
}

impl Model {
    /// Registers backbone parameters first, then the adapter ones the wiring uses.
    pub fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        model: &ModelConfig,
        adapter: &AdapterConfig,
        wiring: &AdapterWiring,
        special: SpecialTokens,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::register(store, model, special, rng)?;
        let adapter = match wiring.kind {
            TransitionKind::None => None,
            _ => Some(Adapter::register(store, adapter, wiring, model.hidden_dim, model.latent_steps, rng)?),
        };
        Ok(Self { backbone, adapter, wiring: wiring.clone() })
    }

    pub fn latent_steps(&self) -> usize {
        match self.wiring.kind {
            TransitionKind::None => 0,
            _ => self.backbone.config.latent_steps,
        }
    }

    /// Latent positions actually used for a stage budget.
    pub fn effective_budget(&self, budget: usize) -> usize {
        budget.min(self.latent_steps())
    }
}
