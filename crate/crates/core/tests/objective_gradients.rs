mod common;

use common::{micro_trainer, objective_gradcheck};
use latent_embed::data::generate::generate_example;
use latent_embed::data::scene::Modality;

fn assert_all_pass(stage: usize) {
    let groups = objective_gradcheck(3, stage, 8);
    assert!(groups.len() > 20);
    for g in &groups {
        println!("stage {stage} {:<28} {:.2e} over {}", g.name, g.max_relative_error, g.coordinates);
    }
    let bad: Vec<_> = groups.iter().filter(|g| !(g.max_relative_error < 1e-3)).map(|g| (&g.name, g.max_relative_error)).collect();
    assert!(bad.is_empty(), "stage {stage}: {bad:?}");
}

#[test]
fn objective_gradients_match_finite_differences_mixed_stage() {
    assert_all_pass(1);
}

#[test]
fn objective_gradients_match_finite_differences_final_stage() {
    assert_all_pass(2);
}

#[test]
fn every_term_is_active_in_the_checked_objective() {
    let (trainer, store) = micro_trainer(3);
    let batch: Vec<_> = Modality::ALL.iter().enumerate().map(|(i, m)| generate_example(3, i, *m)).collect();
    let refs: Vec<_> = batch.iter().collect();
    let r = trainer.batch_gradients(&store, &refs, &trainer.plan[1], 7).unwrap();
    let c = r.components;
    assert!(c.ce > 0.0 && c.nce_gen > 0.0 && c.nce_anc > 0.0 && c.balance > 0.0, "{c:?}");
    assert!(r.grads.iter().all(|g| g.is_finite()));
}
