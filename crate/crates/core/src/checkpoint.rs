//! Checkpoint container: a textual manifest followed by one little-endian
//! f32 blob.
//!
//! ```text
//! ddip-checkpoint v1
//! meta <key> <value>
//! tensor <name> <d0xd1x...> <byte-offset> <element-count>
//! blob <total-elements>
//! <raw little-endian f32 data>
//! ```
//!
//! Offsets are byte positions within the blob. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ddip-checkpoint v1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/'))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        debug_assert!(valid_name(&name), "invalid tensor name {name}");
        self.tensors.push((name, t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {name}")))
    }

    /// Tensors whose names start with `prefix/`, with the prefix stripped.
    pub fn tensors_under(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let pat = format!("{prefix}/");
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&pat))
            .map(|(n, t)| (n[pat.len()..].to_string(), t.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        writeln!(w, "{MAGIC}").map_err(|e| io_err(e))?;
        for (k, v) in &self.meta {
            debug_assert!(valid_name(k) && !v.contains('\n'));
            writeln!(w, "meta {k} {v}").map_err(|e| io_err(e))?;
        }
        let mut offset = 0usize;
        let mut total = 0usize;
        for (name, t) in &self.tensors {
            let dims = t
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(w, "tensor {name} {dims} {offset} {}", t.len()).map_err(|e| io_err(e))?;
            offset += t.len() * 4;
            total += t.len();
        }
        writeln!(w, "blob {total}").map_err(|e| io_err(e))?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(|e| io_err(e))?;
            }
        }
        w.flush().map_err(|e| io_err(e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);

        let mut line = String::new();
        let mut row = 0usize;
        let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<usize> {
            line.clear();
            r.read_line(line).map_err(|e| io_err(e))
        };

        read_line(&mut r, &mut line)?;
        row += 1;
        if line.trim_end() != MAGIC {
            return Err(Error::Parse {
                row,
                msg: format!("bad checkpoint magic: {:?}", line.trim_end()),
            });
        }

        let mut meta = Vec::new();
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
            count: usize,
        }
        let mut entries: Vec<Entry> = Vec::new();
        let total: usize;
        loop {
            if read_line(&mut r, &mut line)? == 0 {
                return Err(Error::Parse {
                    row,
                    msg: "checkpoint truncated before blob header".into(),
                });
            }
            row += 1;
            let text = line.trim_end();
            let mut parts = text.split(' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().unwrap_or_default().to_string();
                    let value = parts.collect::<Vec<_>>().join(" ");
                    if key.is_empty() {
                        return Err(Error::Parse {
                            row,
                            msg: "meta line without key".into(),
                        });
                    }
                    meta.push((key, value));
                }
                Some("tensor") => {
                    let bad = |msg: &str| Error::Parse {
                        row,
                        msg: msg.to_string(),
                    };
                    let name = parts.next().ok_or_else(|| bad("missing name"))?.to_string();
                    let dims = parts.next().ok_or_else(|| bad("missing dims"))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad dims"))?;
                    let offset: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("bad offset"))?;
                    let count: usize = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("bad count"))?;
                    if shape.iter().product::<usize>() != count {
                        return Err(bad("shape/count disagreement"));
                    }
                    entries.push(Entry {
                        name,
                        shape,
                        offset,
                        count,
                    });
                }
                Some("blob") => {
                    total = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
                        Error::Parse {
                            row,
                            msg: "bad blob header".into(),
                        }
                    })?;
                    break;
                }
                other => {
                    return Err(Error::Parse {
                        row,
                        msg: format!("unexpected manifest line: {other:?}"),
                    })
                }
            }
        }

        let mut blob = vec![0u8; total * 4];
        r.read_exact(&mut blob).map_err(|e| io_err(e))?;

        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let end = e.offset + e.count * 4;
            if end > blob.len() {
                return Err(Error::Parse {
                    row,
                    msg: format!("tensor {} overruns blob", e.name),
                });
            }
            let data: Vec<f32> = blob[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.ddip");
        let mut ck = Checkpoint::new();
        ck.put_meta("variant", "ddipnet");
        ck.put_meta("classes", 3);
        let t1 = Tensor::new(vec![2, 3], vec![1.0e-7, -2.5, 3.25, 0.1, 7.0, -0.0]).unwrap();
        let t2 = Tensor::new(vec![1, 4], vec![0.3337, 1.0, -1.0, 42.42]).unwrap();
        ck.put_tensor("backbone/conv0.w", t1.clone());
        ck.put_tensor("z", t2.clone());
        ck.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta_get("variant"), Some("ddipnet"));
        assert_eq!(back.meta_get("classes"), Some("3"));
        let r1 = back.tensor("backbone/conv0.w").unwrap();
        assert_eq!(r1.shape(), t1.shape());
        for (a, b) in r1.data().iter().zip(t1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.tensor("z").unwrap().data(), t2.data());
        assert!(back.tensor("nope").is_err());
    }

    #[test]
    fn rejects_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ddip");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Parse { row: 1, .. })
        ));
    }
}
