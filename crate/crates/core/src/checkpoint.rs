//! Binary checkpoint container with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "STEERCK1"
//! count    u32      number of networks
//! per network:
//!   name_len u32, name utf-8
//!   activation u8
//!   layers u32, widths u32 * layers
//!   params u64, f64 * params
//! ```
//!
//! The sidecar `<path>.json` holds the training configuration, dataset hash
//! and any policy metadata needed to rebuild a sampler.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, Net};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"STEERCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub nets: Vec<(String, Net<f64>)>,
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn net<S: Scalar>(&self, name: &str) -> Result<Net<S>> {
        self.nets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net.cast())
            .ok_or_else(|| Error::Checkpoint(format!("missing network {name:?}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.nets.len() as u32).to_le_bytes());
        for (name, net) in &self.nets {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(net.activation().tag());
            out.extend_from_slice(&(net.widths().len() as u32).to_le_bytes());
            for &w in net.widths() {
                out.extend_from_slice(&(w as u32).to_le_bytes());
            }
            out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(mut bytes: &[u8], meta: serde_json::Value) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let count = read_u32(&mut bytes)? as usize;
        let mut nets = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut bytes)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut bytes, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let mut tag = [0u8; 1];
            read_exact(&mut bytes, &mut tag)?;
            let activation = Activation::from_tag(tag[0])?;
            let layers = read_u32(&mut bytes)? as usize;
            let widths = (0..layers).map(|_| read_u32(&mut bytes).map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
            let mut n = [0u8; 8];
            read_exact(&mut bytes, &mut n)?;
            let n = u64::from_le_bytes(n) as usize;
            let mut params = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut bytes, &mut buf)?;
                params.push(f64::from_le_bytes(buf));
            }
            nets.push((name, Net::from_params(&widths, activation, params)?));
        }
        if !bytes.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { nets, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let meta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        Self::decode(&bytes, meta)
    }

    /// SHA-256 of the binary block, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.encode()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_exact(bytes: &mut &[u8], out: &mut [u8]) -> Result<()> {
    if bytes.len() < out.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = bytes.split_at(out.len());
    out.copy_from_slice(head);
    *bytes = tail;
    Ok(())
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a: Net<f32> = Net::new(&[3, 5, 2], Activation::Silu, &mut r).unwrap();
        let b: Net<f64> = Net::new(&[2, 2], Activation::Tanh, &mut r).unwrap();
        let ck = Checkpoint {
            nets: vec![("enc".into(), a.cast()), ("dec".into(), b.clone())],
            meta: serde_json::json!({"kind": "test"}),
        };
        let back = Checkpoint::decode(&ck.encode(), ck.meta.clone()).unwrap();
        assert_eq!(back, ck);
        // f32 parameters survive the f64 container bit-exactly.
        assert_eq!(back.net::<f32>("enc").unwrap(), a);
        assert!(back.net::<f64>("missing").is_err());
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint { nets: vec![], meta: serde_json::Value::Null };
        let mut bytes = ck.encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes, serde_json::Value::Null).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let net: Net<f64> = Net::new(&[2, 2], Activation::Silu, &mut r).unwrap();
        let ck = Checkpoint { nets: vec![("n".into(), net)], meta: serde_json::Value::Null };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3], serde_json::Value::Null).is_err());
    }

    #[test]
    fn save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = Checkpoint { nets: vec![], meta: serde_json::json!({"dataset_hash": "abc"}) };
        ck.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
