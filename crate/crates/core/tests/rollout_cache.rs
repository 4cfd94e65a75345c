mod common;

use common::{cache_oracle_gap, random_instance};
use latent_embed::autodiff::Tape;
use latent_embed::rollout::rollout;

const BUDGETS: [usize; 4] = [0, 1, 4, 8];

#[test]
fn incremental_rollout_matches_uncached_forward_f32() {
    let mut worst = (0.0f64, String::new());
    for i in 0..120 {
        let inst = random_instance(11, i, &BUDGETS);
        let gap = cache_oracle_gap(&inst.model, &inst.store, &inst.prefix, inst.steps).unwrap();
        if gap > worst.0 {
            worst = (gap, inst.label.clone());
        }
        assert!(gap <= 1e-5, "instance {i} ({}): gap {gap:e}", inst.label);
    }
    println!("worst f32 gap {:e} at {}", worst.0, worst.1);
}

#[test]
fn incremental_rollout_matches_uncached_forward_f64() {
    for i in 0..40 {
        let inst = random_instance(12, i, &BUDGETS);
        let store = inst.store.cast::<f64>();
        let gap = cache_oracle_gap(&inst.model, &store, &inst.prefix, inst.steps).unwrap();
        assert!(gap <= 1e-10, "instance {i} ({}): gap {gap:e}", inst.label);
    }
}

#[test]
fn rollout_grows_cache_by_exactly_the_step_count() {
    for i in 0..16 {
        let inst = random_instance(13, i, &BUDGETS);
        let mut tape = Tape::new(&inst.store);
        let mut p = inst.model.backbone.encode_prefix(&mut tape, &inst.prefix).unwrap();
        let before = p.cache.len();
        let trace = rollout(&mut tape, &inst.model, &mut p, inst.steps, None).unwrap();
        assert_eq!(p.cache.len(), before + inst.steps);
        assert_eq!(trace.latent_states.len(), inst.steps);
        let expect: Vec<usize> = (1..=inst.steps).map(|k| p.slt_position + k).collect();
        assert_eq!(trace.positions, expect);
    }
}

#[test]
fn rollout_refuses_a_grown_cache() {
    let inst = random_instance(14, 1, &[2]);
    let mut tape = Tape::new(&inst.store);
    let mut p = inst.model.backbone.encode_prefix(&mut tape, &inst.prefix).unwrap();
    rollout(&mut tape, &inst.model, &mut p, 1, None).unwrap();
    assert!(rollout(&mut tape, &inst.model, &mut p, 1, None).is_err());
}
