//! Procedural multimodal retrieval tasks with templated step-wise rationales.
//!
//! Every example is a pure function of `(seed, index)`. Queries need a
//! compositional lookup: a spatial hop for images, a row/column join for
//! documents, a frame comparison for videos and an attribute join for text.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{DocCell, Grid, Modality, Object, Role, SceneSpec, FRAMES};
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::vocab::{self as v, GRID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumExample {
    pub id: usize,
    /// Seed the example was generated from (root seed, index pair).
    pub seed: u64,
    pub modality: Modality,
    pub scene: SceneSpec,
    pub question: Vec<String>,
    /// Positive target, a text attribute payload.
    pub target: SceneSpec,
    /// Negatives that differ from the target in exactly one attribute.
    pub distractors: Vec<SceneSpec>,
    /// Segments, each ending in the step delimiter.
    pub rationale: Vec<Vec<String>>,
    /// Answer span, ending in the answer terminator.
    pub answer: Vec<String>,
}

impl CurriculumExample {
    pub fn target_tokens(&self) -> &[String] {
        match &self.target {
            SceneSpec::Txt { tokens } => tokens,
            _ => &[],
        }
    }
}

/// Relative modality weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub txt: f64,
    pub img: f64,
    pub vid: f64,
    pub doc: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { txt: 0.25, img: 0.25, vid: 0.25, doc: 0.25 }
    }
}

impl TaskMix {
    pub fn weight(&self, m: Modality) -> f64 {
        match m {
            Modality::Txt => self.txt,
            Modality::Img => self.img,
            Modality::Vid => self.vid,
            Modality::Doc => self.doc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = Modality::ALL.map(|m| self.weight(m));
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("infeasible task mix {self:?}")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `count` examples.
    pub fn quotas(&self, count: usize) -> Result<[usize; 4]> {
        self.validate()?;
        let total: f64 = Modality::ALL.iter().map(|m| self.weight(*m)).sum();
        let exact = Modality::ALL.map(|m| self.weight(m) / total * count as f64);
        let mut q = exact.map(|e| e.floor() as usize);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (exact[b] - q[b] as f64).total_cmp(&(exact[a] - q[a] as f64)).then(a.cmp(&b)));
        let short = count - q.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            q[i] += 1;
        }
        Ok(q)
    }
}

/// Generates `count` examples. Modalities follow `mix` exactly up to
/// rounding, in a seeded order.
pub fn generate_dataset(mix: &TaskMix, count: usize, seed: u64) -> Result<Vec<CurriculumExample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let quotas = mix.quotas(count)?;
    let mut order: Vec<Modality> = Modality::ALL
        .iter()
        .zip(quotas)
        .flat_map(|(m, q)| std::iter::repeat_n(*m, q))
        .collect();
    order.shuffle(&mut seeds::rng(seed, Stream::Data, &[u64::MAX]));
    Ok(order.into_iter().enumerate().map(|(i, m)| generate_example(seed, i, m)).collect())
}

pub fn generate_example(seed: u64, index: usize, modality: Modality) -> CurriculumExample {
    let ex_seed = seeds::stream_seed(seed, Stream::Data, &[index as u64]);
    let mut rng = seeds::rng(seed, Stream::Data, &[index as u64]);
    let mut built = match modality {
        Modality::Img => image_task(&mut rng),
        Modality::Vid => video_task(&mut rng),
        Modality::Doc => doc_task(&mut rng),
        Modality::Txt => text_task(&mut rng),
    };
    built.id = index;
    built.seed = ex_seed;
    built
}

fn s(x: &str) -> String {
    x.to_string()
}

fn txt(tokens: Vec<String>) -> SceneSpec {
    SceneSpec::Txt { tokens }
}

fn example(
    modality: Modality,
    scene: SceneSpec,
    question: Vec<String>,
    target: Vec<String>,
    distractors: Vec<Vec<String>>,
    rationale: Vec<Vec<String>>,
) -> CurriculumExample {
    let mut answer = target.clone();
    answer.push(s(v::EOA));
    CurriculumExample {
        id: 0,
        seed: 0,
        modality,
        scene,
        question,
        target: txt(target),
        distractors: distractors.into_iter().map(txt).collect(),
        rationale,
        answer,
    }
}

fn segment(parts: Vec<String>) -> Vec<String> {
    let mut p = parts;
    p.push(s(v::SEP));
    p
}

fn other(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    let x = rng.random_range(0..n - 1);
    if x >= not { x + 1 } else { x }
}

/// Direction index to (row delta, col delta): up, down, left, right.
pub fn delta(d: usize) -> (isize, isize) {
    [(-1, 0), (1, 0), (0, -1), (0, 1)][d]
}

pub fn shift(r: usize, c: usize, d: usize) -> Option<(usize, usize)> {
    let (dr, dc) = delta(d);
    let (nr, nc) = (r as isize + dr, c as isize + dc);
    let inside = |x: isize| (0..GRID as isize).contains(&x);
    (inside(nr) && inside(nc)).then_some((nr as usize, nc as usize))
}

fn opposite(d: usize) -> usize {
    [1, 0, 3, 2][d]
}

fn random_objects(rng: &mut ChaCha8Rng, n: usize) -> Vec<Object> {
    let mut all: Vec<Object> = (0..v::COLORS.len())
        .flat_map(|color| (0..v::SHAPES.len()).map(move |shape| Object { color, shape }))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn attr_distractors(rng: &mut ChaCha8Rng, o: Object, rest: &[String]) -> Vec<Vec<String>> {
    let recolor = Object { color: other(rng, v::COLORS.len(), o.color), ..o };
    let reshape = Object { shape: other(rng, v::SHAPES.len(), o.shape), ..o };
    [recolor, reshape]
        .iter()
        .map(|x| {
            let mut t = x.tokens().to_vec();
            t.extend_from_slice(rest);
            t
        })
        .collect()
}

fn image_task(rng: &mut ChaCha8Rng) -> CurriculumExample {
    loop {
        let n = rng.random_range(5..=8);
        let objects = random_objects(rng, n);
        let mut cells: Vec<(usize, usize)> = (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let mut grid = Grid::empty();
        for (o, (r, c)) in objects.iter().zip(&cells) {
            grid.set(*r, *c, Some(*o));
        }
        let hops = if rng.random_bool(0.5) { 1 } else { 2 };
        let mut options = Vec::new();
        for (r, c, o) in grid.objects() {
            for d1 in 0..4 {
                let Some(p1) = shift(r, c, d1) else { continue };
                if hops == 1 {
                    if let Some(t) = grid.get(p1.0, p1.1) {
                        options.push((o, (r, c), vec![(d1, p1)], t));
                    }
                    continue;
                }
                for d2 in (0..4).filter(|d| *d != opposite(d1)) {
                    let Some(p2) = shift(p1.0, p1.1, d2) else { continue };
                    if let Some(t) = grid.get(p2.0, p2.1) {
                        options.push((o, (r, c), vec![(d1, p1), (d2, p2)], t));
                    }
                }
            }
        }
        if options.is_empty() {
            continue;
        }
        let (src, (r, c), path, tgt) = options[rng.random_range(0..options.len())].clone();
        let mut question = vec![s("q:img")];
        question.extend(path.iter().map(|(d, _)| v::direction_token(*d)));
        question.extend(src.tokens());
        let mut rationale = vec![segment(vec![s("find"), v::color_token(src.color), v::shape_token(src.shape), v::row_token(r), v::col_token(c)])];
        for (d, (pr, pc)) in &path {
            rationale.push(segment(vec![s("go"), v::direction_token(*d), v::row_token(*pr), v::col_token(*pc)]));
        }
        rationale.push(segment(vec![s("see"), v::color_token(tgt.color), v::shape_token(tgt.shape)]));
        let distractors = attr_distractors(rng, tgt, &[]);
        return example(Modality::Img, SceneSpec::Img { grid }, question, tgt.tokens().to_vec(), distractors, rationale);
    }
}

fn video_task(rng: &mut ChaCha8Rng) -> CurriculumExample {
    loop {
        let n = rng.random_range(3..=5);
        let objects = random_objects(rng, n);
        let mover = objects[0];
        let d = rng.random_range(0..4);
        let (r0, c0) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
        let mut path = vec![(r0, c0)];
        for _ in 1..FRAMES {
            let (r, c) = *path.last().unwrap();
            match shift(r, c, d) {
                Some(p) => path.push(p),
                None => break,
            }
        }
        if path.len() < FRAMES {
            continue;
        }
        let mut free: Vec<(usize, usize)> = (0..GRID)
            .flat_map(|r| (0..GRID).map(move |c| (r, c)))
            .filter(|p| !path.contains(p))
            .collect();
        free.shuffle(rng);
        let mut base = Grid::empty();
        for (o, (r, c)) in objects[1..].iter().zip(&free) {
            base.set(*r, *c, Some(*o));
        }
        let frames: Vec<Grid> = path
            .iter()
            .map(|(r, c)| {
                let mut g = base.clone();
                g.set(*r, *c, Some(mover));
                g
            })
            .collect();
        let (rl, cl) = path[FRAMES - 1];
        let [ct, st] = mover.tokens();
        let rationale = vec![
            segment(vec![s("find"), v::frame_token(0), ct.clone(), st.clone(), v::row_token(r0), v::col_token(c0)]),
            segment(vec![s("find"), v::frame_token(FRAMES - 1), ct.clone(), st.clone(), v::row_token(rl), v::col_token(cl)]),
            segment(vec![s("go"), ct.clone(), st.clone(), v::direction_token(d)]),
        ];
        let target = vec![ct.clone(), st.clone(), v::direction_token(d)];
        let mut distractors = attr_distractors(rng, mover, &[v::direction_token(d)]);
        distractors.push(vec![ct, st, v::direction_token(other(rng, 4, d))]);
        return example(Modality::Vid, SceneSpec::Vid { frames }, vec![s("q:vid")], target, distractors, rationale);
    }
}

fn doc_task(rng: &mut ChaCha8Rng) -> CurriculumExample {
    let mut headers: Vec<usize> = (0..v::HEADERS.len()).collect();
    headers.shuffle(rng);
    let mut keys: Vec<usize> = (0..v::KEYS.len()).collect();
    keys.shuffle(rng);
    let mut cells = vec![vec![DocCell { role: Role::Empty, content: None }; GRID]; GRID];
    for c in 1..GRID {
        cells[0][c] = DocCell { role: Role::Header, content: Some(headers[c - 1]) };
    }
    for r in 1..GRID {
        cells[r][0] = DocCell { role: Role::Key, content: Some(keys[r - 1]) };
        for cell in &mut cells[r][1..] {
            *cell = DocCell { role: Role::Value, content: Some(rng.random_range(0..v::VALUES)) };
        }
    }
    let (r, c) = (rng.random_range(1..GRID), rng.random_range(1..GRID));
    let (key, header) = (keys[r - 1], headers[c - 1]);
    let value = cells[r][c].content.unwrap();
    let (kt, ht, vt) = (v::key_token(key), v::header_token(header), v::value_token(value));
    let rationale = vec![
        segment(vec![s("find"), kt.clone(), v::row_token(r)]),
        segment(vec![s("find"), ht.clone(), v::col_token(c)]),
        segment(vec![s("read"), ht.clone(), vt.clone()]),
    ];
    let distractors = vec![
        vec![ht.clone(), v::value_token(other(rng, v::VALUES, value))],
        vec![v::header_token(other(rng, v::HEADERS.len(), header)), vt.clone()],
    ];
    example(Modality::Doc, SceneSpec::Doc { cells }, vec![s("q:doc"), kt, ht.clone()], vec![ht, vt], distractors, rationale)
}

fn text_task(rng: &mut ChaCha8Rng) -> CurriculumExample {
    loop {
        let mut names: Vec<usize> = (0..v::NAMES.len()).collect();
        names.shuffle(rng);
        let records: Vec<(usize, Object)> = names[..4]
            .iter()
            .map(|n| (*n, Object { color: rng.random_range(0..v::COLORS.len()), shape: rng.random_range(0..v::SHAPES.len()) }))
            .collect();
        let tokens: Vec<String> = records
            .iter()
            .flat_map(|(n, o)| [v::name_token(*n), v::color_token(o.color), v::shape_token(o.shape)])
            .collect();
        let scene = SceneSpec::Txt { tokens };
        let i = rng.random_range(0..records.len());
        let (name, obj) = records[i];
        if rng.random_bool(0.5) {
            let rationale = vec![
                segment(vec![s("find"), v::name_token(name), v::color_token(obj.color), v::shape_token(obj.shape)]),
                segment(vec![s("see"), v::color_token(obj.color), v::shape_token(obj.shape)]),
            ];
            let distractors = attr_distractors(rng, obj, &[]);
            let question = vec![s("q:txt"), s("op:what"), v::name_token(name)];
            return example(Modality::Txt, scene, question, obj.tokens().to_vec(), distractors, rationale);
        }
        let partners: Vec<&(usize, Object)> =
            records.iter().filter(|(n, o)| *n != name && o.color == obj.color).collect();
        if partners.len() != 1 {
            continue;
        }
        let (pname, pobj) = *partners[0];
        let ct = v::color_token(obj.color);
        let rationale = vec![
            segment(vec![s("find"), v::name_token(name), ct.clone()]),
            segment(vec![s("find"), ct.clone(), v::name_token(pname)]),
            segment(vec![s("see"), v::name_token(pname), ct, v::shape_token(pobj.shape)]),
        ];
        let distractors = attr_distractors(rng, pobj, &[]);
        let question = vec![s("q:txt"), s("op:join"), v::name_token(name)];
        return example(Modality::Txt, scene, question, pobj.tokens().to_vec(), distractors, rationale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_follow_largest_remainder() {
        let mix = TaskMix { txt: 1.0, img: 1.0, vid: 1.0, doc: 0.0 };
        assert_eq!(mix.quotas(10).unwrap(), [4, 3, 3, 0]);
        assert!(TaskMix { txt: 0.0, img: 0.0, vid: 0.0, doc: 0.0 }.quotas(10).is_err());
        assert!(TaskMix { txt: -1.0, img: 1.0, vid: 1.0, doc: 1.0 }.quotas(10).is_err());
    }

    #[test]
    fn same_seed_same_examples() {
        let mix = TaskMix::default();
        assert_eq!(generate_dataset(&mix, 40, 3).unwrap(), generate_dataset(&mix, 40, 3).unwrap());
        assert_ne!(generate_dataset(&mix, 40, 3).unwrap(), generate_dataset(&mix, 40, 4).unwrap());
        assert!(generate_dataset(&mix, 0, 3).is_err());
    }

    #[test]
    fn final_segment_names_the_answer() {
        for ex in generate_dataset(&TaskMix::default(), 200, 11).unwrap() {
            let last = ex.rationale.last().unwrap();
            for tok in &ex.answer[..ex.answer.len() - 1] {
                assert!(last.contains(tok), "{:?} missing {tok}", ex.rationale);
            }
            assert!((2..=4).contains(&ex.rationale.len()));
        }
    }
}
