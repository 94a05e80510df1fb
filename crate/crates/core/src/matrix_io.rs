//! Matrices whose rows are keyed by string ids.
//!
//! Text form: a header line `rows cols`, then one line per row with the id
//! followed by `cols` decimal values, all separated by whitespace. Binary form
//! (`.bin`): the same header line, then per row a little-endian `u32` id length,
//! the id bytes and `cols` little-endian `f64` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMatrix {
    pub ids: Vec<String>,
    pub values: Tensor,
}

impl LabeledMatrix {
    pub fn new(ids: Vec<String>, values: Tensor) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::Dimension {
                op: "labeled matrix",
                left: [ids.len(), 1],
                right: values.shape(),
            });
        }
        Ok(LabeledMatrix { ids, values })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows for `ids` in the given order; every missing id is reported at once.
    pub fn select(&self, ids: &[String]) -> Result<Tensor> {
        let index: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let missing: Vec<String> = ids
            .iter()
            .filter(|i| !index.contains_key(i.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbedding(missing));
        }
        let rows: Vec<usize> = ids.iter().map(|i| index[i.as_str()]).collect();
        Ok(self.values.gather_rows(&rows))
    }

    /// Reads the binary form when the extension is `bin`, text otherwise.
    pub fn read(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(path)
        } else {
            Self::read_text(path)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(path)
        } else {
            self.write_text(path)
        }
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.values.rows(), self.values.cols()).map_err(io)?;
        for (r, id) in self.ids.iter().enumerate() {
            write!(w, "{id}").map_err(io)?;
            for v in self.values.row_slice(r) {
                write!(w, " {v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let (rows, cols) = parse_header(lines.next().unwrap_or(""), path)?;
        let mut ids = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for (k, line) in lines.enumerate() {
            let bad = |d: &str| {
                Error::format(
                    "embedding file",
                    format!("{} row {}: {d}", path.display(), k + 1),
                )
            };
            let mut parts = line.split_whitespace();
            let id = parts.next().ok_or_else(|| bad("empty"))?;
            let before = data.len();
            for p in parts {
                data.push(p.parse::<f64>().map_err(|_| bad("non-numeric value"))?);
            }
            if data.len() - before != cols {
                return Err(bad(&format!(
                    "expected {cols} values, got {}",
                    data.len() - before
                )));
            }
            ids.push(id.to_string());
        }
        if ids.len() != rows {
            return Err(Error::format(
                "embedding file",
                format!(
                    "{}: header promises {rows} rows, found {}",
                    path.display(),
                    ids.len()
                ),
            ));
        }
        LabeledMatrix::new(ids, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = format!("{} {}\n", self.values.rows(), self.values.cols()).into_bytes();
        for (r, id) in self.ids.iter().enumerate() {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for v in self.values.row_slice(r) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad =
            |d: &str| Error::format("binary embedding file", format!("{}: {d}", path.display()));
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
        let (rows, cols) = parse_header(header, path)?;
        let mut pos = nl + 1;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        let mut ids = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|_| bad("id is not UTF-8"))?;
            ids.push(id.to_string());
            for _ in 0..cols {
                data.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        LabeledMatrix::new(ids, Tensor::from_vec(rows, cols, data)?)
    }
}

fn parse_header(line: &str, path: &Path) -> Result<(usize, usize)> {
    let nums: Vec<usize> = line
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    match nums.as_slice() {
        [r, c] if line.split_whitespace().count() == 2 => Ok((*r, *c)),
        _ => Err(Error::format(
            "embedding file",
            format!(
                "{}: header must be `rows cols`, got `{line}`",
                path.display()
            ),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledMatrix {
        let t = Tensor::from_rows(&[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 4.0]]).unwrap();
        LabeledMatrix::new(vec!["a".into(), "b b".replace(' ', "_")], t).unwrap()
    }

    #[test]
    fn round_trips_are_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["m.txt", "m.bin"] {
            let p = dir.path().join(name);
            sample().write(&p).unwrap();
            assert_eq!(LabeledMatrix::read(&p).unwrap(), sample());
        }
    }

    #[test]
    fn select_reports_missing_ids() {
        let m = sample();
        let picked = m.select(&["b_b".into(), "a".into()]).unwrap();
        assert_eq!(picked.row_slice(0), m.values.row_slice(1));
        match m.select(&["zz".into(), "a".into(), "yy".into()]) {
            Err(Error::MissingEmbedding(ids)) => assert_eq!(ids, vec!["zz", "yy"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "2\nx 1\n").unwrap();
        assert!(LabeledMatrix::read(&p).is_err());
        fs::write(&p, "2 1\nx 1\n").unwrap();
        assert!(LabeledMatrix::read(&p).is_err());
    }
}
