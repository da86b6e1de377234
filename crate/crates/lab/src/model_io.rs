//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"TTAM"  u32 version
//! u32 input_dim  u32 classes  u32 n_hidden  u32 hidden[n_hidden]
//! f64 encoder_dropout
//! f64 parameters, in `Model::param_names` order
//! ```
//!
//! A text manifest (`<file>.manifest`) lists each parameter's name and shape.

use std::fs;
use std::path::{Path, PathBuf};

use tta_core::model::{Architecture, Model};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"TTAM";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [arch.input_dim, arch.classes, arch.hidden.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &h in &arch.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.encoder_dropout.to_le_bytes());
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a TTAM model file".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let input_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|h| h as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let arch = Architecture {
        input_dim,
        hidden,
        classes,
        encoder_dropout: r.f64()?,
    };
    arch.validate().map_err(|e| e.to_string())?;
    let expected = arch.parameter_count().saturating_mul(8);
    if bytes.len() - r.pos != expected {
        return Err(format!(
            "architecture needs {expected} parameter bytes, file has {}",
            bytes.len() - r.pos
        ));
    }
    // A freshly initialized model supplies names and shapes; every value is
    // then overwritten from the file.
    let mut model = Model::new(0, arch).map_err(|e| e.to_string())?;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(model)
}

pub fn manifest(model: &Model) -> String {
    let arch = model.architecture();
    let mut text = format!(
        "format TTAM v{VERSION}\ninput_dim {}\nhidden {:?}\nclasses {}\nencoder_dropout {}\nparameters {}\n",
        arch.input_dim,
        arch.hidden,
        arch.classes,
        arch.encoder_dropout,
        arch.parameter_count()
    );
    for (name, p) in model.param_names().iter().zip(model.params()) {
        text.push_str(&format!("{name} {:?}\n", p.shape()));
    }
    text
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

/// Writes the model and its manifest.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| LabError::io(path, e))?;
    let m = manifest_path(path);
    fs::write(&m, manifest(model)).map_err(|e| LabError::io(m, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|reason| LabError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let model = Model::new(4, Architecture::default()).unwrap();
        let bytes = encode(&model);
        assert_eq!(&bytes[..4], b"TTAM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // header is 4 + 4 + 3·4 + 2·4 + 8 bytes, then one f64 per parameter
        assert_eq!(bytes.len(), 36 + 8 * 6410);
    }

    #[test]
    fn decode_rejects_damage() {
        let model = Model::new(4, Architecture::default()).unwrap();
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn manifest_lists_every_parameter() {
        let model = Model::new(4, Architecture::default()).unwrap();
        let m = manifest(&model);
        assert!(m.contains("block0.linear.W [20, 64]"));
        assert!(m.contains("head.b [10]"));
        assert_eq!(m.lines().count(), 6 + model.param_names().len());
    }
}
