//! Brute-force re-derivation of every example from its payload and question.
//!
//! The checker parses the question tokens, searches the scene exhaustively
//! and rebuilds the expected rationale, answer and target. It shares no
//! search logic with the generator.

use super::generate::CurriculumExample;
use super::scene::{Role, SceneSpec};
use crate::error::{Error, Result};
use crate::vocab::{self as v, Vocab, GRID};

fn fail<T>(id: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Schema(format!("example {id}: {}", msg.into())))
}

fn index_of(name: &str, table: &[&str], prefix: &str) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    table.iter().position(|t| *t == rest)
}

fn dir_step(name: &str) -> Option<(isize, isize)> {
    Some(match name {
        "d:up" => (-1, 0),
        "d:down" => (1, 0),
        "d:left" => (0, -1),
        "d:right" => (0, 1),
        _ => return None,
    })
}

fn seg(parts: &[String]) -> Vec<String> {
    let mut p = parts.to_vec();
    p.push(v::SEP.to_string());
    p
}

/// Expected `(rationale, target)` re-derived from the scene.
fn derive(ex: &CurriculumExample) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let id = ex.id;
    let q = &ex.question;
    match &ex.scene {
        SceneSpec::Img { grid } => {
            if q.len() < 4 || q[0] != "q:img" {
                return fail(id, "malformed image question");
            }
            let dirs = &q[1..q.len() - 2];
            let (cname, sname) = (&q[q.len() - 2], &q[q.len() - 1]);
            let color = index_of(cname, &v::COLORS, "c:");
            let shape = index_of(sname, &v::SHAPES, "s:");
            let hits: Vec<(usize, usize)> = (0..GRID)
                .flat_map(|r| (0..GRID).map(move |c| (r, c)))
                .filter(|&(r, c)| grid.get(r, c).is_some_and(|o| Some(o.color) == color && Some(o.shape) == shape))
                .collect();
            let &[(r0, c0)] = hits.as_slice() else {
                return fail(id, format!("reference object found {} times", hits.len()));
            };
            let mut rationale = vec![seg(&[
                "find".into(),
                cname.clone(),
                sname.clone(),
                v::row_token(r0),
                v::col_token(c0),
            ])];
            let (mut r, mut c) = (r0 as isize, c0 as isize);
            for d in dirs {
                let Some((dr, dc)) = dir_step(d) else { return fail(id, format!("bad direction {d}")) };
                r += dr;
                c += dc;
                if !(0..GRID as isize).contains(&r) || !(0..GRID as isize).contains(&c) {
                    return fail(id, "walk leaves the grid");
                }
                rationale.push(seg(&["go".into(), d.clone(), v::row_token(r as usize), v::col_token(c as usize)]));
            }
            let Some(t) = grid.get(r as usize, c as usize) else { return fail(id, "walk ends on an empty cell") };
            let target = vec![v::color_token(t.color), v::shape_token(t.shape)];
            rationale.push(seg(&[vec!["see".to_string()], target.clone()].concat()));
            Ok((rationale, target))
        }
        SceneSpec::Vid { frames } => {
            if q.as_slice() != ["q:vid"] {
                return fail(id, "malformed video question");
            }
            let (first, last) = (&frames[0], &frames[frames.len() - 1]);
            let mut movers = Vec::new();
            for (r, c, o) in first.objects() {
                let end: Vec<(usize, usize)> = last.objects().filter(|(_, _, p)| *p == o).map(|(r, c, _)| (r, c)).collect();
                if end.len() == 1 && end[0] != (r, c) {
                    movers.push((o, (r, c), end[0]));
                }
            }
            let [(o, (r0, c0), (r1, c1))] = movers.as_slice() else {
                return fail(id, format!("{} moving objects", movers.len()));
            };
            let steps = (frames.len() - 1) as isize;
            let (dr, dc) = (*r1 as isize - *r0 as isize, *c1 as isize - *c0 as isize);
            if dr % steps != 0 || dc % steps != 0 {
                return fail(id, "displacement is not a constant unit motion");
            }
            let unit = (dr / steps, dc / steps);
            let Some(d) = ["d:up", "d:down", "d:left", "d:right"].iter().find(|n| dir_step(n) == Some(unit)) else {
                return fail(id, "motion is not axis aligned");
            };
            let (ct, st) = (v::color_token(o.color), v::shape_token(o.shape));
            let rationale = vec![
                seg(&["find".into(), v::frame_token(0), ct.clone(), st.clone(), v::row_token(*r0), v::col_token(*c0)]),
                seg(&["find".into(), v::frame_token(frames.len() - 1), ct.clone(), st.clone(), v::row_token(*r1), v::col_token(*c1)]),
                seg(&["go".into(), ct.clone(), st.clone(), d.to_string()]),
            ];
            Ok((rationale, vec![ct, st, d.to_string()]))
        }
        SceneSpec::Doc { cells } => {
            if q.len() != 3 || q[0] != "q:doc" {
                return fail(id, "malformed document question");
            }
            let find = |want: &str, role: Role, cells_iter: &mut dyn Iterator<Item = (usize, usize)>| {
                cells_iter
                    .filter(|&(r, c)| cells[r][c].role == role && cells[r][c].token().as_deref() == Some(want))
                    .collect::<Vec<_>>()
            };
            let keys = find(&q[1], Role::Key, &mut (0..GRID).map(|r| (r, 0)));
            let heads = find(&q[2], Role::Header, &mut (0..GRID).map(|c| (0, c)));
            let (&[(r, _)], &[(_, c)]) = (keys.as_slice(), heads.as_slice()) else {
                return fail(id, "key or header not found exactly once");
            };
            let Some(value) = cells[r][c].token().filter(|_| cells[r][c].role == Role::Value) else {
                return fail(id, "lookup cell holds no value");
            };
            let rationale = vec![
                seg(&["find".into(), q[1].clone(), v::row_token(r)]),
                seg(&["find".into(), q[2].clone(), v::col_token(c)]),
                seg(&["read".into(), q[2].clone(), value.clone()]),
            ];
            Ok((rationale, vec![q[2].clone(), value]))
        }
        SceneSpec::Txt { tokens } => {
            if q.len() != 3 || q[0] != "q:txt" || tokens.len() % 3 != 0 {
                return fail(id, "malformed text question");
            }
            let records: Vec<&[String]> = tokens.chunks(3).collect();
            let mine: Vec<&&[String]> = records.iter().filter(|r| r[0] == q[2]).collect();
            let [me] = mine.as_slice() else { return fail(id, "name not found exactly once") };
            match q[1].as_str() {
                "op:what" => Ok((
                    vec![seg(&[vec!["find".to_string()], me.to_vec()].concat()), seg(&[vec!["see".to_string()], me[1..].to_vec()].concat())],
                    me[1..].to_vec(),
                )),
                "op:join" => {
                    let others: Vec<&&[String]> = records.iter().filter(|r| r[0] != me[0] && r[1] == me[1]).collect();
                    let [p] = others.as_slice() else { return fail(id, "join partner not unique") };
                    Ok((
                        vec![
                            seg(&["find".into(), me[0].clone(), me[1].clone()]),
                            seg(&["find".into(), me[1].clone(), p[0].clone()]),
                            seg(&["see".into(), p[0].clone(), p[1].clone(), p[2].clone()]),
                        ],
                        vec![p[1].clone(), p[2].clone()],
                    ))
                }
                other => fail(id, format!("unknown text operation {other}")),
            }
        }
    }
}

/// Confirms the example is internally consistent and re-derivable.
pub fn verify_example(ex: &CurriculumExample, vocab: &Vocab) -> Result<()> {
    let id = ex.id;
    if ex.scene.modality() != ex.modality {
        return fail(id, "modality tag disagrees with payload");
    }
    ex.scene.validate(vocab)?;
    ex.target.validate(vocab)?;
    vocab.ids(&ex.question)?;
    if !(2..=4).contains(&ex.rationale.len()) {
        return fail(id, format!("{} rationale segments", ex.rationale.len()));
    }
    for s in &ex.rationale {
        vocab.ids(s)?;
        if s.last().map(String::as_str) != Some(v::SEP) || s[..s.len() - 1].iter().any(|t| t == v::SEP) {
            return fail(id, "segment not terminated by exactly one delimiter");
        }
    }
    let (rationale, target) = derive(ex)?;
    if rationale != ex.rationale {
        return fail(id, format!("rationale {:?} re-derived as {:?}", ex.rationale, rationale));
    }
    if ex.target_tokens() != target.as_slice() {
        return fail(id, "target disagrees with re-derivation");
    }
    let mut answer = target.clone();
    answer.push(v::EOA.to_string());
    if ex.answer != answer {
        return fail(id, "answer span disagrees with re-derivation");
    }
    if ex.distractors.is_empty() {
        return fail(id, "no distractors");
    }
    for d in &ex.distractors {
        let SceneSpec::Txt { tokens } = d else { return fail(id, "distractor is not a text payload") };
        vocab.ids(tokens)?;
        let diffs = tokens.len() == target.len() && tokens.iter().zip(&target).filter(|(a, b)| a != b).count() == 1;
        if !diffs {
            return fail(id, format!("distractor {tokens:?} does not differ in exactly one attribute"));
        }
    }
    Ok(())
}
