//! Synthetic scene payloads and their raw feature encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{self, Vocab, GRID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Txt,
    Img,
    Vid,
    Doc,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Txt, Modality::Img, Modality::Vid, Modality::Doc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Txt => "txt",
            Modality::Img => "img",
            Modality::Vid => "vid",
            Modality::Doc => "doc",
        }
    }

    /// Width of one raw feature cell, `None` for token-only payloads.
    pub fn cell_dim(self) -> Option<usize> {
        match self {
            Modality::Txt => None,
            Modality::Img => Some(IMG_CELL_DIM),
            Modality::Vid => Some(VID_CELL_DIM),
            Modality::Doc => Some(DOC_CELL_DIM),
        }
    }

    /// Number of raw feature cells per payload.
    pub fn cell_count(self) -> usize {
        match self {
            Modality::Txt => 0,
            Modality::Img | Modality::Doc => GRID * GRID,
            Modality::Vid => FRAMES * GRID,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

pub const FRAMES: usize = 4;
/// shape (none + 4) ++ color (none + 4) ++ row ++ col
pub const IMG_CELL_DIM: usize = 5 + 5 + GRID + GRID;
/// per column (color 5 ++ shape 5) ++ frame ++ row
pub const VID_CELL_DIM: usize = GRID * 10 + FRAMES + GRID;
/// role ++ content (headers, keys, values) ++ row ++ col
pub const DOC_CELL_DIM: usize = 4 + DOC_CONTENT + GRID + GRID;
const DOC_CONTENT: usize = vocab::HEADERS.len() + vocab::KEYS.len() + vocab::VALUES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub color: usize,
    pub shape: usize,
}

impl Object {
    pub fn tokens(self) -> [String; 2] {
        [vocab::color_token(self.color), vocab::shape_token(self.shape)]
    }
}

/// A 6x6 grid of optional objects, indexed `[row][col]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid(pub Vec<Vec<Option<Object>>>);

impl Grid {
    pub fn empty() -> Self {
        Grid(vec![vec![None; GRID]; GRID])
    }

    pub fn get(&self, r: usize, c: usize) -> Option<Object> {
        self.0[r][c]
    }

    pub fn set(&mut self, r: usize, c: usize, o: Option<Object>) {
        self.0[r][c] = o;
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, Object)> + '_ {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().filter_map(move |(c, o)| o.map(|o| (r, c, o))))
    }

    fn validate(&self) -> Result<()> {
        if self.0.len() != GRID || self.0.iter().any(|r| r.len() != GRID) {
            return Err(Error::Schema("grid must be 6x6".into()));
        }
        for (_, _, o) in self.objects() {
            if o.color >= vocab::COLORS.len() || o.shape >= vocab::SHAPES.len() {
                return Err(Error::Schema(format!("object attribute out of range: {o:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Empty,
    Header,
    Key,
    Value,
}

/// One document cell. `content` indexes headers, keys or values by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocCell {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<usize>,
}

impl DocCell {
    pub fn token(&self) -> Option<String> {
        let i = self.content?;
        Some(match self.role {
            Role::Empty => return None,
            Role::Header => vocab::header_token(i),
            Role::Key => vocab::key_token(i),
            Role::Value => vocab::value_token(i),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum SceneSpec {
    Txt { tokens: Vec<String> },
    Img { grid: Grid },
    Vid { frames: Vec<Grid> },
    Doc { cells: Vec<Vec<DocCell>> },
}

impl SceneSpec {
    pub fn modality(&self) -> Modality {
        match self {
            SceneSpec::Txt { .. } => Modality::Txt,
            SceneSpec::Img { .. } => Modality::Img,
            SceneSpec::Vid { .. } => Modality::Vid,
            SceneSpec::Doc { .. } => Modality::Doc,
        }
    }

    /// Structural checks: 6x6 grids, four frames differing by one legal move
    /// of a single object, documents with consistent roles.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        match self {
            SceneSpec::Txt { tokens } => {
                if tokens.is_empty() {
                    return Err(Error::Schema("empty text payload".into()));
                }
                vocab.ids(tokens).map(|_| ())
            }
            SceneSpec::Img { grid } => grid.validate(),
            SceneSpec::Vid { frames } => {
                if frames.len() != FRAMES {
                    return Err(Error::Schema(format!("video needs {FRAMES} frames, got {}", frames.len())));
                }
                for f in frames {
                    f.validate()?;
                }
                for w in frames.windows(2) {
                    single_move(&w[0], &w[1])?;
                }
                Ok(())
            }
            SceneSpec::Doc { cells } => {
                if cells.len() != GRID || cells.iter().any(|r| r.len() != GRID) {
                    return Err(Error::Schema("document must be 6x6".into()));
                }
                for row in cells {
                    for cell in row {
                        let limit = match cell.role {
                            Role::Empty => 0,
                            Role::Header => vocab::HEADERS.len(),
                            Role::Key => vocab::KEYS.len(),
                            Role::Value => vocab::VALUES,
                        };
                        match (cell.role, cell.content) {
                            (Role::Empty, None) => {}
                            (Role::Empty, Some(_)) => return Err(Error::Schema("empty cell with content".into())),
                            (_, Some(i)) if i < limit => {}
                            _ => return Err(Error::Schema(format!("bad document cell {cell:?}"))),
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Raw feature cells `[cells, cell_dim]`; `None` for text payloads.
    pub fn raw_features(&self) -> Option<Tensor<f32>> {
        let (n, dim, data) = match self {
            SceneSpec::Txt { .. } => return None,
            SceneSpec::Img { grid } => {
                let mut data = Vec::with_capacity(GRID * GRID * IMG_CELL_DIM);
                for r in 0..GRID {
                    for c in 0..GRID {
                        let mut cell = [0.0f32; IMG_CELL_DIM];
                        let (s, col) = match grid.get(r, c) {
                            Some(o) => (o.shape + 1, o.color + 1),
                            None => (0, 0),
                        };
                        cell[s] = 1.0;
                        cell[5 + col] = 1.0;
                        cell[10 + r] = 1.0;
                        cell[10 + GRID + c] = 1.0;
                        data.extend_from_slice(&cell);
                    }
                }
                (GRID * GRID, IMG_CELL_DIM, data)
            }
            SceneSpec::Vid { frames } => {
                let mut data = Vec::with_capacity(FRAMES * GRID * VID_CELL_DIM);
                for (f, grid) in frames.iter().enumerate() {
                    for r in 0..GRID {
                        let mut cell = [0.0f32; VID_CELL_DIM];
                        for c in 0..GRID {
                            let (col, s) = match grid.get(r, c) {
                                Some(o) => (o.color + 1, o.shape + 1),
                                None => (0, 0),
                            };
                            cell[c * 10 + col] = 1.0;
                            cell[c * 10 + 5 + s] = 1.0;
                        }
                        cell[GRID * 10 + f] = 1.0;
                        cell[GRID * 10 + FRAMES + r] = 1.0;
                        data.extend_from_slice(&cell);
                    }
                }
                (FRAMES * GRID, VID_CELL_DIM, data)
            }
            SceneSpec::Doc { cells } => {
                let mut data = Vec::with_capacity(GRID * GRID * DOC_CELL_DIM);
                for (r, row) in cells.iter().enumerate() {
                    for (c, cell) in row.iter().enumerate() {
                        let mut v = [0.0f32; DOC_CELL_DIM];
                        v[cell.role as usize] = 1.0;
                        if let Some(i) = cell.content {
                            let off = match cell.role {
                                Role::Header => 0,
                                Role::Key => vocab::HEADERS.len(),
                                _ => vocab::HEADERS.len() + vocab::KEYS.len(),
                            };
                            v[4 + off + i] = 1.0;
                        }
                        v[4 + DOC_CONTENT + r] = 1.0;
                        v[4 + DOC_CONTENT + GRID + c] = 1.0;
                        data.extend_from_slice(&v);
                    }
                }
                (GRID * GRID, DOC_CELL_DIM, data)
            }
        };
        Some(Tensor::matrix(n, dim, data).expect("feature layout"))
    }
}

/// Verifies that `b` equals `a` except for one object moved by one cell.
fn single_move(a: &Grid, b: &Grid) -> Result<()> {
    let mut gone = Vec::new();
    let mut came = Vec::new();
    for r in 0..GRID {
        for c in 0..GRID {
            match (a.get(r, c), b.get(r, c)) {
                (x, y) if x == y => {}
                (Some(x), None) => gone.push((r, c, x)),
                (None, Some(y)) => came.push((r, c, y)),
                _ => return Err(Error::Schema("frame changes an object in place".into())),
            }
        }
    }
    match (gone.as_slice(), came.as_slice()) {
        ([(r0, c0, x)], [(r1, c1, y)]) if x == y && r0.abs_diff(*r1) + c0.abs_diff(*c1) == 1 => Ok(()),
        _ => Err(Error::Schema("consecutive frames must differ by one single-cell move".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_with(objs: &[(usize, usize, Object)]) -> Grid {
        let mut g = Grid::empty();
        for &(r, c, o) in objs {
            g.set(r, c, Some(o));
        }
        g
    }

    #[test]
    fn img_features_have_36_cells() {
        let o = Object { color: 1, shape: 2 };
        let scene = SceneSpec::Img { grid: grid_with(&[(2, 3, o)]) };
        let f = scene.raw_features().unwrap();
        assert_eq!(f.shape(), &[36, IMG_CELL_DIM]);
        let cell = f.row(2 * GRID + 3);
        assert_eq!(cell[3], 1.0);
        assert_eq!(cell[5 + 2], 1.0);
        assert_eq!(cell.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn video_needs_single_moves() {
        let o = Object { color: 0, shape: 0 };
        let frames: Vec<Grid> = (0..4).map(|i| grid_with(&[(1, i, o)])).collect();
        let scene = SceneSpec::Vid { frames: frames.clone() };
        scene.validate(&Vocab::standard()).unwrap();
        assert_eq!(scene.raw_features().unwrap().shape(), &[24, VID_CELL_DIM]);
        let mut bad = frames;
        bad[3] = grid_with(&[(1, 5, o)]);
        assert!(SceneSpec::Vid { frames: bad }.validate(&Vocab::standard()).is_err());
    }

    #[test]
    fn non_square_grid_rejected() {
        let scene = SceneSpec::Img { grid: Grid(vec![vec![None; 6]; 5]) };
        assert!(scene.validate(&Vocab::standard()).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = SceneSpec::Doc {
            cells: vec![vec![DocCell { role: Role::Value, content: Some(3) }; 6]; 6],
        };
        let s = serde_json::to_string(&scene).unwrap();
        let back: SceneSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, scene);
    }
}
