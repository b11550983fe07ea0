//! `MMBT0001` container: checkpoints and study blobs share one layout.
//!
//! ```text
//! MMBT0001\n
//! meta <key>=<value>\n            (zero or more)
//! tensor <name> <d0>x<d1>... <byte offset>\n   (manifest order)
//! \n
//! <little-endian f32 data, row-major, in manifest order>
//! ```
//!
//! Offsets are relative to the first data byte and must be contiguous.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMBT0001";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("container: {}", msg.into()))
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| bad(format!("missing meta {key}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n', ' ']) || v.contains('\n') {
                return Err(bad(format!("unencodable meta {k:?}")));
            }
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains([' ', '\n']) {
                return Err(bad(format!("unencodable tensor name {name:?}")));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", shape.join("x")));
            offset += 4 * t.len();
        }
        header.push('\n');
        let mut out = Vec::with_capacity(MAGIC.len() + 1 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..8] != MAGIC || bytes[8] != b'\n' {
            return Err(bad("bad magic"));
        }
        let body = &bytes[9..];
        let end = if body.first() == Some(&b'\n') {
            0
        } else {
            body.windows(2)
                .position(|w| w == b"\n\n")
                .map(|p| p + 1)
                .ok_or_else(|| bad("unterminated header"))?
        };
        let header = std::str::from_utf8(&body[..end]).map_err(|_| bad("header is not utf-8"))?;
        let data = &body[end + 1..];
        let mut c = Container::default();
        let mut expected = 0usize;
        for (lineno, line) in header.lines().enumerate() {
            let at = |m: &str| bad(format!("header line {}: {m}", lineno + 2));
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| at("meta without '='"))?;
                c.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(at("expected: tensor <name> <shape> <offset>"));
                };
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| at("bad shape")))
                    .collect::<Result<Vec<_>>>()?;
                let offset: usize = offset.parse().map_err(|_| at("bad offset"))?;
                if offset != expected {
                    return Err(at("non-contiguous offset"));
                }
                let n: usize = shape.iter().product();
                let raw = data
                    .get(offset..offset + 4 * n)
                    .ok_or_else(|| at("data truncated"))?;
                let values = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                c.tensors
                    .push((name.to_string(), Tensor::new(shape, values)?));
                expected = offset + 4 * n;
            } else {
                return Err(at("unknown record"));
            }
        }
        if expected != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parameters (plus config metadata) as a container.
pub fn checkpoint_container(params: &ParamStore<f32>, meta: Vec<(String, String)>) -> Container {
    Container {
        meta,
        tensors: params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    }
}

pub fn params_from_container(c: &Container) -> Result<ParamStore<f32>> {
    let mut p = ParamStore::new();
    for (n, t) in &c.tensors {
        p.insert(n.clone(), t.clone())?;
    }
    Ok(p)
}
