//! Binary model checkpoints.
//!
//! Layout: magic, format version, network shape, the named parameter tensors
//! in canonical order, then a SHA-256 digest of everything before it. All
//! integers are little endian; tensor data is raw f64 bits, so a load returns
//! the saved model bitwise.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::{NetworkSpec, Parameters};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FTCP";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &Parameters, spec: &NetworkSpec) -> Result<()> {
    params.check_spec(spec)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.hidden_dims().len() as u32).to_le_bytes());
    for &h in spec.hidden_dims() {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(Parameters, NetworkSpec)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Format("checksum mismatch".into()));
    }

    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let input_dim = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let spec = NetworkSpec::new(input_dim, hidden)?;

    let template = Parameters::zeros(&spec);
    let expected = template.named_tensors();
    let tensor_count = r.u32()? as usize;
    if tensor_count != expected.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, file has {tensor_count}",
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(template.entry_count());
    for exp in &expected {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if name != exp.name {
            return Err(Error::Format(format!(
                "tensor {:?} where {:?} was expected",
                name, exp.name
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != exp.shape {
            return Err(Error::Format(format!(
                "tensor {} has shape {shape:?}, expected {:?}",
                exp.name, exp.shape
            )));
        }
        for _ in 0..shape.iter().product::<usize>() {
            flat.push(r.f64()?);
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    let params = template.with_flat(&flat)?;
    Ok((params, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_network;
    use std::fs;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fedtta_checkpoint_test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let spec = NetworkSpec::new(5, vec![7, 3]).unwrap();
        let params = init_network(&spec, 42);
        let path = tmp("roundtrip.ckpt");
        save(&path, &params, &spec).unwrap();
        let (back, back_spec) = load(&path).unwrap();
        assert!(back.bitwise_eq(&params));
        assert_eq!(back_spec.input_dim(), 5);
        assert_eq!(back_spec.hidden_dims(), &[7, 3]);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corruption_is_detected() {
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 1);
        let path = tmp("corrupt.ckpt");
        save(&path, &params, &spec).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncation_and_foreign_files_are_rejected() {
        let spec = NetworkSpec::new(3, vec![4]).unwrap();
        let params = init_network(&spec, 1);
        let path = tmp("short.ckpt");
        save(&path, &params, &spec).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(load(&path).is_err());

        fs::write(&path, b"not a checkpoint at all, just text").unwrap();
        assert!(load(&path).is_err());
        fs::remove_file(&path).unwrap();
    }
}
