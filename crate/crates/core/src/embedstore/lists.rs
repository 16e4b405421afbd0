//! TSV lists of sampled triplets and pairs. Each file starts with a header
//! row naming the columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LabeledPair, Triplet};
use crate::error::{Error, Result};

const TRIPLET_HEADER: &str = "x0\tx1\tx2";
const PAIR_HEADER: &str = "x1\tx2\tlabel";

pub fn write_triplets_tsv(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let mut s = String::from(TRIPLET_HEADER);
    s.push('\n');
    for t in triplets {
        let _ = writeln!(s, "{}\t{}\t{}", t.x0, t.x1, t.x2);
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_pairs_tsv(path: impl AsRef<Path>, pairs: &[LabeledPair]) -> Result<()> {
    let mut s = String::from(PAIR_HEADER);
    s.push('\n');
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{}", p.x1, p.x2, p.label);
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn rows<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(Error::Format(format!(
                "expected header {header:?}, found {other:?}"
            )))
        }
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 2, l.split('\t').collect())))
}

fn field<T: std::str::FromStr>(cols: &[&str], idx: usize, line: usize) -> Result<T> {
    cols.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: bad column {}", idx + 1)))
}

pub fn read_triplets_tsv(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = rows(&text, TRIPLET_HEADER)?
        .map(|(line, cols)| {
            if cols.len() != 3 {
                return Err(Error::Format(format!("line {line}: expected 3 columns")));
            }
            Ok(Triplet {
                x0: field(&cols, 0, line)?,
                x1: field(&cols, 1, line)?,
                x2: field(&cols, 2, line)?,
            })
        })
        .collect();
    parsed
}

pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = rows(&text, PAIR_HEADER)?
        .map(|(line, cols)| {
            if cols.len() != 3 {
                return Err(Error::Format(format!("line {line}: expected 3 columns")));
            }
            Ok(LabeledPair {
                x1: field(&cols, 0, line)?,
                x2: field(&cols, 1, line)?,
                label: field(&cols, 2, line)?,
            })
        })
        .collect();
    parsed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let triplets = vec![
            Triplet { x0: 1, x1: 2, x2: 3 },
            Triplet { x0: 4, x1: 5, x2: 6 },
        ];
        let tp = dir.path().join("t.tsv");
        write_triplets_tsv(&tp, &triplets).unwrap();
        assert_eq!(read_triplets_tsv(&tp).unwrap(), triplets);

        let pairs = vec![LabeledPair { x1: 1, x2: 9, label: false }];
        let pp = dir.path().join("p.tsv");
        write_pairs_tsv(&pp, &pairs).unwrap();
        assert_eq!(fs::read_to_string(&pp).unwrap(), "x1\tx2\tlabel\n1\t9\tfalse\n");
        assert_eq!(read_pairs_tsv(&pp).unwrap(), pairs);

        fs::write(&pp, "a\tb\n1\t2\n").unwrap();
        assert!(matches!(read_pairs_tsv(&pp), Err(Error::Format(_))));
    }
}
