//! Stage plans and the rewriter that turns explicit rationales into latent blocks.

use serde::{Deserialize, Serialize};

use super::generate::CurriculumExample;
use super::scene::SceneSpec;
use crate::backbone::{AnchorPlacement, Element, MultimodalSequence};
use crate::error::{Error, Result};
use crate::vocab::{self, Vocab};

/// A stage-specific serialization:
/// `prefix (ending <slt>) ++ <ct> x latent_slots ++ suffix (<elt> ... <gen>)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedSequence {
    pub prefix: MultimodalSequence,
    pub latent_slots: usize,
    pub suffix: Vec<usize>,
    /// Aligned with `suffix`; true where the token receives cross-entropy.
    pub supervised: Vec<bool>,
}

impl SerializedSequence {
    /// Tokens after the prefix, with `<ct>` placeholders spelled out.
    pub fn tail_tokens(&self, ct_id: usize) -> Vec<usize> {
        let mut out = vec![ct_id; self.latent_slots];
        out.extend_from_slice(&self.suffix);
        out
    }

    /// Supervision mask over [`Self::tail_tokens`].
    pub fn tail_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.latent_slots];
        out.extend_from_slice(&self.supervised);
        out
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().filter(|m| **m).count()
    }
}

/// One curriculum stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: usize,
    pub total_stages: usize,
    /// `stage / total_stages`.
    pub replaced_fraction: f64,
    /// Latent positions `ceil(fraction * K)`.
    pub latent_budget: usize,
    /// Share of the total epoch budget (may be fractional).
    pub epochs: f64,
}

impl StagePlan {
    pub fn is_final(&self) -> bool {
        self.stage == self.total_stages
    }

    /// Segments absorbed into the latent block: `ceil(fraction * segments)`.
    pub fn replaced_segments(&self, segments: usize) -> usize {
        (self.stage * segments).div_ceil(self.total_stages)
    }
}

/// Stage 0 (fully explicit) takes 3/5 of the epochs, the final (fully
/// latent) stage 1/5, and intermediate stages share the remaining 1/5. With a
/// single stage the final stage absorbs the intermediate share.
pub fn make_stage_plan(total_stages: usize, total_epochs: f64, latent_steps: usize) -> Result<Vec<StagePlan>> {
    if total_stages == 0 {
        return Err(Error::Config("at least one curriculum stage is required".into()));
    }
    if !(total_epochs > 0.0) || !total_epochs.is_finite() {
        return Err(Error::Config(format!("total epochs {total_epochs} must be positive")));
    }
    let s = total_stages;
    Ok((0..=s)
        .map(|stage| {
            let epochs = if stage == 0 {
                total_epochs * 3.0 / 5.0
            } else if stage == s {
                if s == 1 { total_epochs * 2.0 / 5.0 } else { total_epochs / 5.0 }
            } else {
                total_epochs / 5.0 / (s - 1) as f64
            };
            StagePlan {
                stage,
                total_stages: s,
                replaced_fraction: stage as f64 / s as f64,
                latent_budget: (stage * latent_steps).div_ceil(s),
                epochs,
            }
        })
        .collect())
}

/// Query and positive-target serializations of one example at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedPair {
    pub query: SerializedSequence,
    pub target: SerializedSequence,
}

fn token_elements(vocab: &Vocab, tokens: &[String]) -> Result<Vec<Element>> {
    Ok(vocab.ids(tokens)?.into_iter().map(Element::Token).collect())
}

/// Prefix of a scene: `lead ++ payload ++ question` with the anchor placed
/// per `placement`, closed by `<slt>`.
pub fn scene_prefix(
    vocab: &Vocab,
    lead: &str,
    scene: &SceneSpec,
    question: &[String],
    placement: AnchorPlacement,
) -> Result<MultimodalSequence> {
    let sp = vocab.special();
    let mut e = vec![Element::Token(vocab.id(lead)?)];
    match scene {
        SceneSpec::Txt { tokens } => e.extend(token_elements(vocab, tokens)?),
        other => e.push(Element::Features {
            modality: other.modality(),
            cells: other.raw_features().expect("feature payload"),
        }),
    }
    let q = token_elements(vocab, question)?;
    match placement {
        AnchorPlacement::BeforeSlt => {
            e.extend(q);
            e.push(Element::Token(sp.anchor_id));
        }
        AnchorPlacement::AfterContent => {
            e.push(Element::Token(sp.anchor_id));
            e.extend(q);
        }
    }
    e.push(Element::Token(sp.slt_id));
    Ok(MultimodalSequence::new(e))
}

pub fn query_prefix(ex: &CurriculumExample, vocab: &Vocab, placement: AnchorPlacement) -> Result<MultimodalSequence> {
    scene_prefix(vocab, vocab::QUERY, &ex.scene, &ex.question, placement)
}

/// Candidate prefix for a text target payload.
pub fn target_prefix(target: &SceneSpec, vocab: &Vocab, placement: AnchorPlacement) -> Result<MultimodalSequence> {
    scene_prefix(vocab, vocab::TARGET, target, &[], placement)
}

fn suffix(vocab: &Vocab, spans: &[&[String]]) -> Result<(Vec<usize>, Vec<bool>)> {
    let sp = vocab.special();
    let mut tokens = vec![sp.elt_id];
    let mut mask = vec![false];
    for span in spans {
        for id in vocab.ids(span)? {
            tokens.push(id);
            mask.push(true);
        }
    }
    tokens.push(sp.gen_id);
    mask.push(false);
    Ok((tokens, mask))
}

/// Serializes `example` for `plan`: the first `ceil(f * segments)`
/// rationale segments become `<ct>` slots' responsibility and leave the
/// suffix; the rest and the answer are supervised. The final stage drops
/// rationale and answer so `<elt>` meets `<gen>`. The target has no
/// rationale: its answer span is supervised until the final stage.
pub fn rewrite_for_stage(
    example: &CurriculumExample,
    plan: &StagePlan,
    vocab: &Vocab,
    placement: AnchorPlacement,
) -> Result<StagedPair> {
    if plan.stage > plan.total_stages || plan.total_stages == 0 {
        return Err(Error::InvalidArgument(format!("stage {} of {}", plan.stage, plan.total_stages)));
    }
    if example.rationale.is_empty() || example.answer.is_empty() {
        return Err(Error::InvalidArgument(format!("example {} has no rationale or answer", example.id)));
    }
    let query_prefix = query_prefix(example, vocab, placement)?;
    let target_prefix = target_prefix(&example.target, vocab, placement)?;
    let (q_suffix, q_mask, t_suffix, t_mask) = if plan.is_final() {
        let (s, m) = suffix(vocab, &[])?;
        (s.clone(), m.clone(), s, m)
    } else {
        let cut = plan.replaced_segments(example.rationale.len());
        let mut spans: Vec<&[String]> = example.rationale[cut..].iter().map(Vec::as_slice).collect();
        spans.push(&example.answer);
        let (qs, qm) = suffix(vocab, &spans)?;
        let mut target_answer = example.target_tokens().to_vec();
        target_answer.push(vocab::EOA.to_string());
        let (ts, tm) = suffix(vocab, &[&target_answer])?;
        (qs, qm, ts, tm)
    };
    Ok(StagedPair {
        query: SerializedSequence {
            prefix: query_prefix,
            latent_slots: plan.latent_budget,
            suffix: q_suffix,
            supervised: q_mask,
        },
        target: SerializedSequence {
            prefix: target_prefix,
            latent_slots: plan.latent_budget,
            suffix: t_suffix,
            supervised: t_mask,
        },
    })
}

/// Inference-time serialization: prefix, `steps` latent slots, `<elt> <gen>`.
pub fn inference_sequence(prefix: MultimodalSequence, steps: usize, vocab: &Vocab) -> SerializedSequence {
    let sp = vocab.special();
    SerializedSequence { prefix, latent_slots: steps, suffix: vec![sp.elt_id, sp.gen_id], supervised: vec![false, false] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_dataset, TaskMix};

    #[test]
    fn default_plan_split() {
        let plan = make_stage_plan(4, 5.0, 8).unwrap();
        let epochs: Vec<f64> = plan.iter().map(|p| p.epochs).collect();
        let expected = [3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in epochs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(plan.iter().map(|p| p.latent_budget).collect::<Vec<_>>(), vec![0, 2, 4, 6, 8]);
        assert_eq!(plan[0].replaced_fraction, 0.0);
        assert_eq!(plan[4].replaced_fraction, 1.0);
    }

    #[test]
    fn single_stage_and_eight_stage_plans() {
        let one = make_stage_plan(1, 5.0, 8).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one[1].latent_budget, 8);
        assert!(one[1].is_final());
        let eight = make_stage_plan(8, 5.0, 8).unwrap();
        assert_eq!(eight.len(), 9);
        assert_eq!(eight.iter().map(|p| p.latent_budget).collect::<Vec<_>>(), (0..=8).collect::<Vec<_>>());
        assert!((eight.iter().map(|p| p.epochs).sum::<f64>() - 5.0).abs() < 1e-12);
        assert!(make_stage_plan(0, 5.0, 8).is_err());
    }

    #[test]
    fn stage_zero_and_final_stage_serializations() {
        let vocab = Vocab::standard();
        let sp = vocab.special();
        let ex = &generate_dataset(&TaskMix::default(), 8, 1).unwrap()[0];
        let plan = make_stage_plan(4, 5.0, 8).unwrap();
        let first = rewrite_for_stage(ex, &plan[0], &vocab, AnchorPlacement::BeforeSlt).unwrap();
        assert_eq!(first.query.latent_slots, 0);
        let explicit: usize = ex.rationale.iter().map(Vec::len).sum::<usize>() + ex.answer.len();
        assert_eq!(first.query.supervised_count(), explicit);
        let last = rewrite_for_stage(ex, &plan[4], &vocab, AnchorPlacement::BeforeSlt).unwrap();
        assert_eq!(last.query.suffix, vec![sp.elt_id, sp.gen_id]);
        assert_eq!(last.query.supervised_count(), 0);
        assert_eq!(last.query.latent_slots, 8);
        assert_eq!(last.target.supervised_count(), 0);
    }

    #[test]
    fn half_replacement_of_four_segments() {
        let vocab = Vocab::standard();
        let mut ex = generate_dataset(&TaskMix::default(), 1, 2).unwrap().remove(0);
        let seg = |t: &str| vec![t.to_string(), vocab::SEP.to_string()];
        ex.rationale = vec![seg("find"), seg("go"), seg("see"), seg("read")];
        let plan = StagePlan { stage: 2, total_stages: 4, replaced_fraction: 0.5, latent_budget: 4, epochs: 1.0 };
        let pair = rewrite_for_stage(&ex, &plan, &vocab, AnchorPlacement::BeforeSlt).unwrap();
        let expect_ids = vocab.ids(&["see", vocab::SEP, "read", vocab::SEP]).unwrap();
        assert_eq!(&pair.query.suffix[1..5], expect_ids.as_slice());
        assert_eq!(pair.query.supervised_count(), 4 + ex.answer.len());
    }

    #[test]
    fn anchor_placement_options() {
        let vocab = Vocab::standard();
        let sp = vocab.special();
        let ex = &generate_dataset(&TaskMix { txt: 1.0, img: 0.0, vid: 0.0, doc: 0.0 }, 1, 3).unwrap()[0];
        let a = query_prefix(ex, &vocab, AnchorPlacement::BeforeSlt).unwrap();
        let (anchor, slt) = a.validate_prefix(&sp).unwrap();
        assert_eq!(anchor + 1, slt);
        let b = query_prefix(ex, &vocab, AnchorPlacement::AfterContent).unwrap();
        let (anchor, slt) = b.validate_prefix(&sp).unwrap();
        assert_eq!(anchor + 1 + ex.question.len(), slt);
    }
}
