//! Dataset directory layout:
//!
//! - `catalog.json`: item count, raw-id remap and popularity.
//! - `sequences.bin`: per user a little-endian `u32` length followed by that
//!   many `u32` item ids.
//! - `timestamps.bin`: the parallel `i64` timestamps, same framing.
//! - `labels.bin` (optional): `u32` indices into `meta.json`'s label vocabulary.
//! - `meta.json`: user ids, label vocabulary and the content fingerprint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Catalog, InteractionSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sequences: Vec<InteractionSequence>,
}

impl Dataset {
    pub fn new(catalog: Catalog, sequences: Vec<InteractionSequence>) -> Result<Self> {
        for s in &sequences {
            if s.items.len() != s.timestamps.len()
                || s.behaviors.as_ref().is_some_and(|b| b.len() != s.items.len())
            {
                return Err(Error::data(format!("user {}: parallel arrays differ in length", s.user_id)));
            }
            if let Some(&bad) = s.items.iter().find(|&&i| i == 0 || i > catalog.num_items) {
                return Err(Error::data(format!(
                    "user {}: item {bad} outside 1..={}",
                    s.user_id, catalog.num_items
                )));
            }
        }
        Ok(Self { catalog, sequences })
    }

    pub fn has_labels(&self) -> bool {
        self.sequences.iter().any(|s| s.behaviors.is_some())
    }

    /// SHA-256 over the serialized catalog, sequences and labels.
    pub fn fingerprint(&self) -> String {
        let enc = Encoded::new(self);
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.catalog).expect("catalog serializes"));
        h.update(&enc.items);
        h.update(&enc.timestamps);
        if let Some(l) = &enc.labels {
            h.update(l);
        }
        h.update(serde_json::to_vec(&enc.meta.label_vocab).expect("vocab serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    user_ids: Vec<u64>,
    label_vocab: Vec<String>,
    fingerprint: String,
}

const FORMAT_VERSION: u32 = 1;

struct Encoded {
    items: Vec<u8>,
    timestamps: Vec<u8>,
    labels: Option<Vec<u8>>,
    meta: Meta,
}

impl Encoded {
    fn new(ds: &Dataset) -> Self {
        let mut vocab: Vec<String> = ds
            .sequences
            .iter()
            .filter_map(|s| s.behaviors.as_ref())
            .flatten()
            .cloned()
            .collect();
        vocab.sort();
        vocab.dedup();
        let labeled = ds.has_labels();
        let mut items = Vec::new();
        let mut timestamps = Vec::new();
        let mut labels = Vec::new();
        for s in &ds.sequences {
            let n = s.items.len() as u32;
            items.extend_from_slice(&n.to_le_bytes());
            timestamps.extend_from_slice(&n.to_le_bytes());
            for &i in &s.items {
                items.extend_from_slice(&(i as u32).to_le_bytes());
            }
            for &t in &s.timestamps {
                timestamps.extend_from_slice(&t.to_le_bytes());
            }
            if labeled {
                // u32::MAX marks a sequence without labels.
                match &s.behaviors {
                    Some(b) => {
                        labels.extend_from_slice(&n.to_le_bytes());
                        for l in b {
                            let code = vocab.binary_search(l).expect("label in vocabulary") as u32;
                            labels.extend_from_slice(&code.to_le_bytes());
                        }
                    }
                    None => labels.extend_from_slice(&u32::MAX.to_le_bytes()),
                }
            }
        }
        Self {
            items,
            timestamps,
            labels: labeled.then_some(labels),
            meta: Meta {
                format_version: FORMAT_VERSION,
                user_ids: ds.sequences.iter().map(|s| s.user_id).collect(),
                label_vocab: vocab,
                fingerprint: String::new(),
            },
        }
    }
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut enc = Encoded::new(ds);
    enc.meta.fingerprint = ds.fingerprint();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("catalog.json", &serde_json::to_vec_pretty(&ds.catalog)?)?;
    write("sequences.bin", &enc.items)?;
    write("timestamps.bin", &enc.timestamps)?;
    let labels_path = dir.join("labels.bin");
    match &enc.labels {
        Some(l) => write("labels.bin", l)?,
        None if labels_path.exists() => fs::remove_file(&labels_path).map_err(|e| Error::io(&labels_path, e))?,
        None => {}
    }
    write("meta.json", &serde_json::to_vec_pretty(&enc.meta)?)?;
    Ok(enc.meta.fingerprint)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::data(format!("{}: truncated at byte {}", self.file, self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn i64(&mut self) -> Result<i64> {
        self.take::<8>().map(i64::from_le_bytes)
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::data(format!("{}: {} trailing bytes", self.file, self.bytes.len() - self.pos)))
        }
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let catalog: Catalog = serde_json::from_slice(&read("catalog.json")?)?;
    let meta: Meta = serde_json::from_slice(&read("meta.json")?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let items = read("sequences.bin")?;
    let stamps = read("timestamps.bin")?;
    let labels = dir.join("labels.bin").exists().then(|| read("labels.bin")).transpose()?;

    let mut ir = Reader { bytes: &items, pos: 0, file: "sequences.bin" };
    let mut tr = Reader { bytes: &stamps, pos: 0, file: "timestamps.bin" };
    let mut lr = labels.as_ref().map(|b| Reader { bytes: b, pos: 0, file: "labels.bin" });
    let mut sequences = Vec::with_capacity(meta.user_ids.len());
    for &user_id in &meta.user_ids {
        let n = ir.u32()? as usize;
        if tr.u32()? as usize != n {
            return Err(Error::data(format!("timestamps.bin: length mismatch for user {user_id}")));
        }
        let seq_items = (0..n).map(|_| ir.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let timestamps = (0..n).map(|_| tr.i64()).collect::<Result<Vec<_>>>()?;
        let behaviors = match lr.as_mut() {
            None => None,
            Some(r) => match r.u32()? {
                u32::MAX => None,
                m if m as usize == n => Some(
                    (0..n)
                        .map(|_| {
                            let code = r.u32()? as usize;
                            meta.label_vocab.get(code).cloned().ok_or_else(|| {
                                Error::data(format!("labels.bin: code {code} outside vocabulary"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => return Err(Error::data(format!("labels.bin: length mismatch for user {user_id}"))),
            },
        };
        sequences.push(InteractionSequence {
            user_id,
            items: seq_items,
            timestamps,
            behaviors,
        });
    }
    ir.finish()?;
    tr.finish()?;
    if let Some(r) = &lr {
        r.finish()?;
    }
    let ds = Dataset::new(catalog, sequences)?;
    if ds.fingerprint() != meta.fingerprint {
        return Err(Error::data(format!(
            "{}: content fingerprint does not match meta.json",
            dir.display()
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn sample() -> Dataset {
        let spec = SyntheticSpec {
            num_users: 20,
            num_items: 30,
            num_clusters: 3,
            ..Default::default()
        };
        let (seqs, catalog, _) = generate_synthetic(&spec).unwrap();
        Dataset::new(catalog, seqs).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let fp = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.fingerprint(), fp);
    }

    #[test]
    fn unlabeled_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sample();
        ds.sequences.iter_mut().for_each(|s| s.behaviors = None);
        save_dataset(&ds, dir.path()).unwrap();
        assert!(!dir.path().join("labels.bin").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn resave_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&sample(), a.path()).unwrap();
        save_dataset(&load_dataset(a.path()).unwrap(), b.path()).unwrap();
        for f in ["catalog.json", "sequences.bin", "timestamps.bin", "labels.bin", "meta.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(), dir.path()).unwrap();
        let p = dir.path().join("sequences.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[4] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn out_of_catalog_items_are_rejected() {
        let ds = sample();
        let mut seqs = ds.sequences.clone();
        seqs[0].items[0] = 31;
        assert!(Dataset::new(ds.catalog, seqs).is_err());
    }
}
