//! Flat binary archive: an 8-byte magic, a length-prefixed JSON manifest,
//! then `{name, ownership tag, shape, little-endian f64 values}` records.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{CompositeModel, Layout, Ownership, ParameterStore, StandaloneModel, Submodel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ONESTOP1";
const UNTAGGED: u8 = 0xff;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub ownership: Option<Ownership>,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub manifest: Value,
    pub records: Vec<Record>,
}

impl Archive {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.ownership.map_or(UNTAGGED, Ownership::tag));
            out.extend_from_slice(&(r.tensor.shape().len() as u32).to_le_bytes());
            for &d in r.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint archive"));
        }
        let len = cur.u64()? as usize;
        let manifest: Value = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        let count = cur.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(n)?.to_vec())
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?;
            let tag = cur.take(1)?[0];
            let ownership = match tag {
                UNTAGGED => None,
                t => Some(
                    Ownership::from_tag(t)
                        .ok_or_else(|| Error::format(path, format!("bad ownership tag {t}")))?,
                ),
            };
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format(path, format!("record {name}: {e}")))?;
            records.push(Record {
                name,
                ownership,
                tensor,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self { manifest, records })
    }

    /// Writes through a temporary file and a rename, so an interrupted write
    /// never replaces a good archive with a partial one.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for r in &self.records {
            let o = r
                .ownership
                .ok_or_else(|| Error::contract(format!("record {} has no ownership tag", r.name)))?;
            store.insert(&r.name, r.tensor.clone(), o)?;
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn records(store: &ParameterStore) -> Vec<Record> {
    store
        .iter()
        .map(|(name, e)| Record {
            name: name.to_string(),
            ownership: Some(e.ownership()),
            tensor: {
                let mut t = e.tensor.clone();
                t.zero_grad();
                t
            },
        })
        .collect()
}

fn manifest_kind<'a>(a: &'a Archive, path: &Path, kind: &str, key: &str) -> Result<&'a Value> {
    if a.manifest.get("kind").and_then(Value::as_str) != Some(kind) {
        return Err(Error::format(path, format!("archive does not hold a {kind} model")));
    }
    a.manifest
        .get(key)
        .ok_or_else(|| Error::format(path, format!("manifest lacks {key}")))
}

impl CompositeModel {
    pub fn to_archive(&self) -> Archive {
        Archive {
            manifest: json!({
                "kind": "composite",
                "architecture": self.architecture(),
                "layout": self.layout(),
            }),
            records: records(self.params()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let layout: Layout = serde_json::from_value(manifest_kind(a, path, "composite", "layout")?.clone())
            .map_err(|e| Error::format(path, format!("layout: {e}")))?;
        CompositeModel::from_parts(layout, a.store()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}

impl StandaloneModel {
    pub fn to_archive(&self) -> Archive {
        Archive {
            manifest: json!({
                "kind": "standalone",
                "submodel": self.submodel,
            }),
            records: records(&self.params),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let submodel: Submodel =
            serde_json::from_value(manifest_kind(a, path, "standalone", "submodel")?.clone())
                .map_err(|e| Error::format(path, format!("submodel: {e}")))?;
        let params = a.store()?;
        let expected = submodel.network.param_shapes();
        if expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, s)| params.get(n).map(|t| t.shape()) != Some(s.as_slice()))
        {
            return Err(Error::format(path, "parameters do not match the submodel"));
        }
        Ok(Self { submodel, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Which;
    use crate::nn::ModelConfig;

    #[test]
    fn composite_round_trip_is_exact() {
        let big = ModelConfig::dense(12, 4, 2, 2).with_moe(2);
        let small = ModelConfig::dense(12, 4, 2, 1);
        let m = CompositeModel::build_shared(&big, &small, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = CompositeModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(StandaloneModel::load(&path).is_err());

        let s = m.extract(Which::Small).unwrap();
        let spath = dir.path().join("s.ckpt");
        s.save(&spath).unwrap();
        assert_eq!(StandaloneModel::load(&spath).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = StandaloneModel::new(&ModelConfig::dense(8, 2, 1, 1), Which::Small, 0).unwrap();
        let bytes = m.to_archive().encode();
        let p = Path::new("x");
        assert!(Archive::decode(&bytes[..bytes.len() - 3], p).is_err());
        assert!(Archive::decode(b"garbage!", p).is_err());
        assert!(Archive::decode(&bytes, p).is_ok());
    }
}
