//! Line-delimited dataset files.
//!
//! Line 1 is a [`DatasetHeader`]; every following line is one
//! [`CurriculumExample`] as JSON. Field schemas are documented in the README.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{CurriculumExample, TaskMix};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "latent-embed-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub task_mix: TaskMix,
}

impl DatasetHeader {
    pub fn new(count: usize, seed: u64, task_mix: TaskMix) -> Self {
        Self { format: DATASET_FORMAT.into(), version: DATASET_VERSION, count, seed, task_mix }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_dataset(header: &DatasetHeader, examples: &[CurriculumExample]) -> Result<Vec<u8>> {
    if header.count != examples.len() {
        return Err(Error::InvalidArgument(format!(
            "header count {} but {} examples",
            header.count,
            examples.len()
        )));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, examples: &[CurriculumExample]) -> Result<()> {
    atomic_write(path, &encode_dataset(header, examples)?)
}

pub fn parse_dataset(text: &str) -> Result<(DatasetHeader, Vec<CurriculumExample>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: DatasetHeader =
        serde_json::from_str(lines.next().ok_or_else(|| Error::Schema("empty dataset file".into()))?)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Schema(format!("unsupported dataset {} v{}", header.format, header.version)));
    }
    let examples = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<CurriculumExample>, _>>()?;
    if examples.len() != header.count {
        return Err(Error::Schema(format!("header promises {} examples, file has {}", header.count, examples.len())));
    }
    Ok((header, examples))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<CurriculumExample>)> {
    parse_dataset(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::generate_dataset;

    #[test]
    fn round_trip_and_count_check() {
        let mix = TaskMix::default();
        let data = generate_dataset(&mix, 12, 4).unwrap();
        let header = DatasetHeader::new(12, 4, mix);
        let bytes = encode_dataset(&header, &data).unwrap();
        let (h, back) = parse_dataset(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, data);
        let truncated: String = std::str::from_utf8(&bytes).unwrap().lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(parse_dataset(&truncated).is_err());
        let bad_header = DatasetHeader { count: 3, ..header };
        assert!(encode_dataset(&bad_header, &data).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
