//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use latent_embed::adapter::AdapterConfig;
use latent_embed::autodiff::{Tape, Var};
use latent_embed::backbone::{AnchorPlacement, ModelConfig, MultimodalSequence};
use latent_embed::data::curriculum::{query_prefix, target_prefix};
use latent_embed::data::generate::generate_example;
use latent_embed::data::scene::Modality;
use latent_embed::error::Result;
use latent_embed::model::Model;
use latent_embed::params::ParamStore;
use latent_embed::rollout::{extract_embeddings, rollout, EmbedMode};
use latent_embed::tensor::Real;
use latent_embed::train::{apply_ablation, build_model, AblationFlags};
use latent_embed::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A randomly shaped model, a prefix to run it on and a rollout length.
pub struct Instance {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub prefix: MultimodalSequence,
    pub steps: usize,
    pub label: String,
}

/// Draws instance `index` of a reproducible family. `steps` cycles through
/// `budgets`; widths, depths, routing and ablation wiring vary with the seed.
pub fn random_instance(seed: u64, index: usize, budgets: &[usize]) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let steps = budgets[index % budgets.len()];
    let (hidden_dim, head_count) = [(8, 1), (8, 2), (16, 2), (16, 4), (24, 3), (32, 4)][rng.random_range(0..6)];
    let layer_count = rng.random_range(1..=3);
    let placement = if rng.random_bool(0.5) { AnchorPlacement::BeforeSlt } else { AnchorPlacement::AfterContent };
    let model_cfg = ModelConfig {
        hidden_dim,
        head_count,
        layer_count,
        latent_steps: steps.max(1) + rng.random_range(0..3),
        anchor_placement: placement,
        ..ModelConfig::default()
    };
    let expert_count = rng.random_range(1..=4);
    let adapter_cfg = AdapterConfig {
        expert_count,
        top_k: rng.random_range(1..=expert_count),
        renormalize: rng.random_bool(0.5),
        router_init_std: [0.02, 0.5, 2.0][rng.random_range(0..3)],
        ..AdapterConfig::default()
    };
    let mut flags = AblationFlags::default();
    match rng.random_range(0..6) {
        0 if steps == 0 => flags.no_latent = true,
        1 => flags.single_mlp = true,
        2 => flags.no_anchor_routing = true,
        3 => flags.no_shared_expert = true,
        4 => flags.no_step_embedding = true,
        _ => {}
    }
    let wiring = apply_ablation(&flags, &adapter_cfg, 4).expect("valid ablation");
    let (model, mut store) = build_model(&model_cfg, &adapter_cfg, &wiring, rng.random()).expect("model");
    // Perturb gains and biases so that no parameter sits at its trivial init.
    for e in store.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let vocab = Vocab::standard();
    let modality = Modality::ALL[rng.random_range(0..4)];
    let ex = generate_example(rng.random(), index, modality);
    let prefix = if rng.random_bool(0.5) {
        query_prefix(&ex, &vocab, placement).expect("query prefix")
    } else {
        target_prefix(&ex.target, &vocab, placement).expect("target prefix")
    };
    let label = format!("D={hidden_dim} H={head_count} L={layer_count} K={steps} M={expert_count} {flags:?} {modality}");
    Instance { model, store, prefix, steps, label }
}

fn values<T: Real>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).iter().map(|x| x.as_f64()).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest absolute difference between the cached incremental rollout and an
/// uncached oracle that re-runs the whole causal forward from scratch for
/// every latent step, including `z(0)`, every `z(k)` and the `<gen>` state.
/// The oracle recomputes each adapter input from its own `z(k-1)`.
pub fn cache_oracle_gap<T: Real>(model: &Model, store: &ParamStore<T>, prefix: &MultimodalSequence, steps: usize) -> Result<f64> {
    let bb = &model.backbone;
    let sp = bb.special;

    let mut tape = Tape::new(store);
    let mut p = bb.encode_prefix(&mut tape, prefix)?;
    let h_slt = p.h_slt;
    let trace = rollout(&mut tape, model, &mut p, steps, None)?;
    let pre_gen = {
        let inputs = bb.embed_tokens(&mut tape, &[sp.elt_id, sp.gen_id])?;
        let mut cache = p.cache;
        let before = cache.len();
        let h = bb.forward(&mut tape, inputs, &mut cache)?;
        assert_eq!(cache.len(), before + 2);
        tape.row(h, 1)
    };
    let mut cached = vec![values(&tape, h_slt)];
    cached.extend(trace.latent_states.iter().map(|z| values(&tape, *z)));
    cached.push(values(&tape, pre_gen));

    let mut o = Tape::new(store);
    let (anchor_pos, slt_pos) = prefix.validate_prefix(&sp)?;
    let x_prefix = bb.embed_sequence(&mut o, prefix)?;
    let full = |o: &mut Tape<T>, rows: &[Var]| -> Result<Var> {
        let x = if rows.len() == 1 { rows[0] } else { o.concat_rows(rows) };
        let mut cache = bb.new_cache();
        bb.forward(o, x, &mut cache)
    };
    let h = full(&mut o, &[x_prefix])?;
    let anchor = o.row(h, anchor_pos);
    let mut z = o.row(h, slt_pos);
    let mut oracle = vec![values(&o, z)];
    let mut rows = vec![x_prefix];
    for k in 1..=steps {
        let adapter = model.adapter.as_ref().expect("adapter for latent steps");
        let a = adapter.adapt(&mut o, z, anchor, k, None)?.adapted;
        rows.push(a);
        let h = full(&mut o, &rows)?;
        z = o.row(h, prefix.len() + k - 1);
        oracle.push(values(&o, z));
    }
    rows.push(bb.embed_tokens(&mut o, &[sp.elt_id, sp.gen_id])?);
    let h = full(&mut o, &rows)?;
    let n = o.shape(h).0;
    let gen = o.row(h, n - 1);
    oracle.push(values(&o, gen));

    // The embedding read through the public path must agree too.
    let mut t2 = Tape::new(store);
    let mut p2 = bb.encode_prefix(&mut t2, prefix)?;
    rollout(&mut t2, model, &mut p2, steps, None)?;
    let emb = extract_embeddings(&mut t2, bb, &mut p2, EmbedMode::Infer)?;
    let gen = oracle.last().expect("gen row").clone();
    let norm = gen.iter().map(|x| x * x).sum::<f64>().sqrt();
    let normalized: Vec<f64> = gen.iter().map(|x| x / norm).collect();

    let mut gap = max_abs(&values(&t2, emb.e_gen), &normalized);
    for (c, r) in cached.iter().zip(&oracle) {
        gap = gap.max(max_abs(c, r));
    }
    Ok(gap)
}

/// Worst central-difference error over sampled coordinates of one parameter.
pub struct GroupCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Micro configuration for the objective check: D=8, one layer, two
/// specialized experts and two latent steps.
pub fn micro_trainer(seed: u64) -> (latent_embed::train::Trainer, ParamStore<f64>) {
    use latent_embed::train::{LossWeights, TrainConfig, Trainer};
    let model = ModelConfig { hidden_dim: 8, layer_count: 1, head_count: 2, latent_steps: 2, ..ModelConfig::default() };
    let adapter = AdapterConfig { expert_count: 2, top_k: 2, router_init_std: 0.5, ..AdapterConfig::default() };
    let train = TrainConfig { seed, batch_size: 4, stages: 2, epochs: 3.0, validation_count: 1, ..TrainConfig::default() };
    let (trainer, state) = Trainer::new(model, adapter, LossWeights::default(), train).expect("micro trainer");
    let mut store = state.store.cast::<f64>();
    // Move every value off its initialization so gains, biases and
    // zero-initialized tensors all carry generic gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for e in store.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    (trainer, store)
}

/// Central-difference check of the full batch objective (CE, both InfoNCE
/// terms and the balance term) against its reverse-mode gradient, for every
/// parameter tensor at the given stage.
pub fn objective_gradcheck(seed: u64, stage: usize, per_group: usize) -> Vec<GroupCheck> {
    use latent_embed::gradcheck::{check_with, GradCheckOptions};
    let (trainer, mut store) = micro_trainer(seed);
    let batch: Vec<_> = Modality::ALL.iter().enumerate().map(|(i, m)| generate_example(seed, i, *m)).collect();
    let refs: Vec<_> = batch.iter().collect();
    let plan = trainer.plan[stage].clone();
    let point = store.flatten();
    let store_cell = std::cell::RefCell::new(&mut store);
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut s = store_cell.borrow_mut();
        s.load_flat(x)?;
        let r = trainer.batch_gradients(&**s, &refs, &plan, 7)?;
        Ok((r.total, r.grads))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout: Vec<(String, usize)> = store_cell.borrow().entries().iter().map(|e| (e.name.clone(), e.tensor.len())).collect();
    let mut offset = 0;
    let mut out = Vec::new();
    for (name, len) in layout {
        let coords: Vec<usize> = if len <= per_group {
            (offset..offset + len).collect()
        } else {
            (0..per_group).map(|_| offset + rng.random_range(0..len)).collect()
        };
        let opts = GradCheckOptions { tolerance: 1e-3, step: 1e-5, floor: 1e-7 };
        let report = check_with(f, &point, &coords, opts).expect("gradient check");
        out.push(GroupCheck { name, max_relative_error: report.max_relative_error, coordinates: coords.len() });
        offset += len;
    }
    out
}
