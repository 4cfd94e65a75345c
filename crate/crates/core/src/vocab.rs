//! Fixed symbolic vocabulary shared by the generator, the serializer and the model.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const GRID: usize = 6;
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const DIRECTIONS: [&str; 4] = ["up", "down", "left", "right"];
pub const NAMES: [&str; 6] = ["ada", "bo", "cy", "di", "ed", "flo"];
pub const HEADERS: [&str; 8] = ["price", "size", "stock", "owner", "city", "year", "grade", "code"];
pub const KEYS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
pub const VALUES: usize = 12;

pub const PAD: &str = "<pad>";
pub const ANCHOR: &str = "<anchor>";
pub const SLT: &str = "<slt>";
pub const CT: &str = "<ct>";
pub const ELT: &str = "<elt>";
pub const GEN: &str = "<gen>";
pub const SEP: &str = "<sep>";
pub const EOA: &str = "<eoa>";
pub const QUERY: &str = "<qry>";
pub const TARGET: &str = "<tgt>";

const STRUCTURAL: [&str; 14] = [
    SEP, EOA, QUERY, TARGET, "q:img", "q:vid", "q:doc", "q:txt", "op:what", "op:join", "find", "go", "see", "read",
];

pub fn color_token(i: usize) -> String {
    format!("c:{}", COLORS[i])
}
pub fn shape_token(i: usize) -> String {
    format!("s:{}", SHAPES[i])
}
pub fn direction_token(i: usize) -> String {
    format!("d:{}", DIRECTIONS[i])
}
pub fn row_token(r: usize) -> String {
    format!("row:{r}")
}
pub fn col_token(c: usize) -> String {
    format!("col:{c}")
}
pub fn frame_token(f: usize) -> String {
    format!("frame:{f}")
}
pub fn name_token(i: usize) -> String {
    format!("n:{}", NAMES[i])
}
pub fn header_token(i: usize) -> String {
    format!("h:{}", HEADERS[i])
}
pub fn key_token(i: usize) -> String {
    format!("key:{}", KEYS[i])
}
pub fn value_token(i: usize) -> String {
    format!("v:{i:02}")
}

/// Ids of the five special tokens that structure a serialized sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub anchor_id: usize,
    pub slt_id: usize,
    pub ct_id: usize,
    pub elt_id: usize,
    pub gen_id: usize,
}

impl SpecialTokens {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ids = [self.anchor_id, self.slt_id, self.ct_id, self.elt_id, self.gen_id];
        for (i, a) in ids.iter().enumerate() {
            if *a >= vocab_size {
                return Err(Error::OutOfRange { what: "special token", index: *a, limit: vocab_size });
            }
            if ids[i + 1..].contains(a) {
                return Err(Error::InvalidArgument(format!("special token id {a} used twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The single vocabulary used throughout the crate. Order is stable.
    pub fn standard() -> Self {
        let mut names: Vec<String> = [PAD, ANCHOR, SLT, CT, ELT, GEN].iter().map(|s| s.to_string()).collect();
        names.extend(STRUCTURAL.iter().map(|s| s.to_string()));
        names.extend((0..COLORS.len()).map(color_token));
        names.extend((0..SHAPES.len()).map(shape_token));
        names.extend((0..DIRECTIONS.len()).map(direction_token));
        names.extend((0..GRID).map(row_token));
        names.extend((0..GRID).map(col_token));
        names.extend((0..4).map(frame_token));
        names.extend((0..NAMES.len()).map(name_token));
        names.extend((0..HEADERS.len()).map(header_token));
        names.extend((0..KEYS.len()).map(key_token));
        names.extend((0..VALUES).map(value_token));
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("unknown token {name:?}")))
    }

    pub fn ids<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.id(n.as_ref())).collect()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens {
            anchor_id: self.index[ANCHOR],
            slt_id: self.index[SLT],
            ct_id: self.index[CT],
            elt_id: self.index[ELT],
            gen_id: self.index[GEN],
        }
    }

    pub fn eoa_id(&self) -> usize {
        self.index[EOA]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct_and_in_range() {
        let v = Vocab::standard();
        v.special().validate(v.len()).unwrap();
        let mut bad = v.special();
        bad.gen_id = bad.slt_id;
        assert!(bad.validate(v.len()).is_err());
        bad = v.special();
        bad.ct_id = v.len();
        assert!(bad.validate(v.len()).is_err());
    }

    #[test]
    fn names_round_trip() {
        let v = Vocab::standard();
        for id in 0..v.len() {
            assert_eq!(v.id(v.name(id).unwrap()).unwrap(), id);
        }
        assert!(v.id("c:purple").is_err());
    }
}
