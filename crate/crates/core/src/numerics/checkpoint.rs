//! Binary checkpoint format.
//!
//! ```text
//! magic    "CGRU"
//! version  u32 LE
//! count    u32 LE
//! count x {
//!   name_len u32 LE, name (utf-8),
//!   rank     u32 LE, dims (rank x u64 LE),
//!   payload  (product(dims) x f64 LE, row-major)
//! }
//! ```

use std::path::Path;

use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CGRU";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 12 + n.len() + 8 * (t.shape().len() + t.len())).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("tensor name is not utf-8: {e}"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflow".to_string())?);
        }
        let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("size overflow")?;
        let bytes = r.take(n.checked_mul(8).ok_or("size overflow")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

impl Network {
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.named(self.params()).expect("own parameter vector")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_tensors())
    }

    /// Loads parameters into a network of the expected architecture.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let tensors = read(path)?;
        self.set_named(&tensors).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("incompatible with expected architecture: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Layer};
    use crate::rng;

    fn net() -> Network {
        Network::init(
            vec![
                Layer::Dense { inputs: 3, outputs: 4 },
                Layer::Act(Activation::Tanh),
                Layer::Dense { inputs: 4, outputs: 1 },
            ],
            &mut rng::stream(1, 0),
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&net().to_tensors());
        assert_eq!(&bytes[..4], b"CGRU");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"0.weight");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let original = net();
        original.save(&a).unwrap();
        let mut copy = Network::zeros(original.layers().to_vec()).unwrap();
        copy.load_into(&a).unwrap();
        copy.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(copy, original);
    }

    #[test]
    fn bad_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.ckpt");
        let mut bytes = encode(&net().to_tensors());
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        let err = read(&p).unwrap_err();
        assert!(err.to_string().contains("broken.ckpt"), "{err}");
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_and_wrong_arch_are_rejected() {
        let bytes = encode(&net().to_tensors());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.ckpt");
        net().save(&p).unwrap();
        let mut other = Network::zeros(vec![Layer::Dense { inputs: 3, outputs: 2 }]).unwrap();
        assert!(matches!(other.load_into(&p), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = read(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
