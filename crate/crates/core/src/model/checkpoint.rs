//! Binary checkpoint format.
//!
//! ```text
//! "HTXC" | u16 version | u16 flags | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f32 data
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Everything is little-endian. Class names and free-form metadata travel as
//! `meta.class_names` / `meta.info` tensors whose elements are UTF-8 bytes;
//! metadata is one `key=value` line per entry with `\\`, `\n` and `\=` escaped.

use std::collections::BTreeMap;
use std::path::Path;

use super::network::{Init, SqueezeNet};
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HTXC";
pub const CHECKPOINT_VERSION: u16 = 1;
/// Set when `optim.*` tensors carry optimizer moments.
pub const FLAG_OPTIMIZER_STATE: u16 = 1;

const META_CLASSES: &str = "meta.class_names";
const META_INFO: &str = "meta.info";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '=' => out.push_str("\\="),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Splits at the first `=` that is not escaped.
fn split_meta_line(line: &str) -> Option<(&str, &str)> {
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' => escaped = true,
            '=' => return Some((&line[..i], &line[i + 1..])),
            _ => {}
        }
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub flags: u16,
    pub tensors: Vec<(String, Tensor)>,
    pub class_names: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Snapshot of every model tensor plus the architecture keys needed to rebuild it.
    pub fn from_model(model: &SqueezeNet) -> Self {
        let spec = model.spec();
        let mut metadata = BTreeMap::new();
        metadata.insert("model.input_size".into(), spec.input_size.to_string());
        metadata.insert("model.num_classes".into(), spec.num_classes.to_string());
        metadata.insert("model.hidden".into(), spec.head.hidden.to_string());
        metadata.insert("model.dropout1".into(), spec.head.dropout1.to_string());
        metadata.insert("model.dropout2".into(), spec.head.dropout2.to_string());
        metadata.insert("model.bn_eps".into(), spec.bn_eps.to_string());
        metadata.insert("model.bn_momentum".into(), spec.bn_momentum.to_string());
        Self {
            flags: 0,
            tensors: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            class_names: model.class_names().to_vec(),
            metadata,
        }
    }

    /// Rebuild a model from a checkpoint written by [`Checkpoint::from_model`].
    pub fn to_model(&self) -> Result<SqueezeNet> {
        let mut spec = NetworkSpec::standard();
        spec.input_size = self.meta_parse("model.input_size")?.unwrap_or(spec.input_size);
        spec.num_classes = self.meta_parse("model.num_classes")?.unwrap_or(spec.num_classes);
        spec.head.hidden = self.meta_parse("model.hidden")?.unwrap_or(spec.head.hidden);
        spec.head.dropout1 = self.meta_parse("model.dropout1")?.unwrap_or(spec.head.dropout1);
        spec.head.dropout2 = self.meta_parse("model.dropout2")?.unwrap_or(spec.head.dropout2);
        spec.bn_eps = self.meta_parse("model.bn_eps")?.unwrap_or(spec.bn_eps);
        spec.bn_momentum = self.meta_parse("model.bn_momentum")?.unwrap_or(spec.bn_momentum);
        let mut model = SqueezeNet::build(spec, Init::Kaiming, RngStream::new(0, "init", 0, 0))?;
        model.load_state(self)?;
        Ok(model)
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.metadata
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::invalid(format!("checkpoint metadata {key}={v} is malformed")))
            })
            .transpose()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(&str, Vec<u32>, Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.as_str(),
                    t.shape().iter().map(|&d| d as u32).collect(),
                    t.data().to_vec(),
                )
            })
            .collect();
        let classes = self.class_names.join("\n");
        let info: String = self.metadata.iter().map(|(k, v)| format!("{}={}\n", escape(k), escape(v))).collect();
        for (name, text) in [(META_CLASSES, classes), (META_INFO, info)] {
            if !text.is_empty() {
                let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
                records.push((name, vec![bytes.len() as u32], bytes));
            }
        }

        let payload: usize = records.iter().map(|(n, d, v)| 3 + n.len() + 4 * d.len() + 4 * v.len()).sum();
        let mut out = Vec::with_capacity(12 + payload + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, dims, data) in &records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(parse_err(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(4, format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint {
            flags,
            ..Default::default()
        };
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| parse_err(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims_at = r.pos;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| parse_err(dims_at, format!("dims {dims:?} of `{name}` exceed the file")))?;
            let data: Vec<f32> = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if name == META_CLASSES || name == META_INFO {
                let text = utf8_from_floats(&data).ok_or_else(|| parse_err(at, format!("`{name}` is not UTF-8 text")))?;
                if name == META_CLASSES {
                    ckpt.class_names = text.split('\n').map(str::to_string).collect();
                } else {
                    for line in text.lines() {
                        let (k, v) = split_meta_line(line)
                            .ok_or_else(|| parse_err(at, format!("metadata line `{line}` has no `=`")))?;
                        ckpt.metadata.insert(unescape(k), unescape(v));
                    }
                }
            } else {
                let tensor = Tensor::new(dims, data).map_err(|e| parse_err(dims_at, e.to_string()))?;
                ckpt.tensors.push((name, tensor));
            }
        }
        let crc_at = r.pos;
        let stored = r.u32()?;
        if r.remaining() != 0 {
            return Err(parse_err(r.pos, "trailing bytes after checksum"));
        }
        if crc32fast::hash(&bytes[..crc_at]) != stored {
            return Err(parse_err(crc_at, "checksum mismatch"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn utf8_from_floats(data: &[f32]) -> Option<String> {
    let bytes: Option<Vec<u8>> = data
        .iter()
        .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
        .collect();
    String::from_utf8(bytes?).ok()
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::CheckpointParse {
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(parse_err(self.pos, format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.insert("a.weight", Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 1.0));
        c.insert("scalar", Tensor::scalar(f32::MIN_POSITIVE));
        c.class_names = vec!["x".into(), "y".into()];
        c.metadata.insert("epoch".into(), "3".into());
        c.metadata.insert("log".into(), "a,b\n1,2\n".into());
        c.metadata.insert("odd=key\\".into(), "x=\\n".into());
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"HTXC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CheckpointParse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CheckpointParse { offset: 4, .. })));
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointParse { .. })));
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn corrupted_dimension_does_not_allocate_wildly() {
        let mut bytes = sample().to_bytes();
        // first tensor: 12-byte header, u16 len, "a.weight", u8 rank, first dim
        let dim_at = 12 + 2 + "a.weight".len() + 1;
        bytes[dim_at..dim_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointParse { offset, .. }) => assert_eq!(offset, dim_at),
            other => panic!("unexpected {other:?}"),
        }
    }
}
