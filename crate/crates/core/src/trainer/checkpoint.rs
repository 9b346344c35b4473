use std::io::{Cursor, Read};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hash of the canonical JSON form of a config (first 8 bytes of SHA-256, big endian).
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<u64> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Named tensor sections plus a header.
///
/// Layout: magic `MDCK`, version `u32`, config hash `u64`, step `u64`,
/// section count `u32`, then per section (sorted by name) the name length
/// `u32`, UTF-8 name, and the tensor in its binary form. All little endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub sections: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in self.sections.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(array(&mut cur)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = u64::from_le_bytes(array(&mut cur)?);
        let step = u64::from_le_bytes(array(&mut cur)?);
        let count = u32::from_le_bytes(array(&mut cur)?);
        let mut sections = ParamStore::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(array(&mut cur)?) as usize;
            if len > bytes.len() {
                return Err(Error::Format("section name length exceeds file".into()));
            }
            let mut name = vec![0u8; len];
            read(&mut cur, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let t = Tensor::read_binary(&mut cur)?;
            if sections.contains(&name) {
                return Err(Error::Format(format!("duplicate section `{name}`")));
            }
            sections.insert(name, t);
        }
        if cur.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config_hash, step, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Sections under `prefix.` (e.g. `student`, `adaptor`).
    pub fn group(&self, prefix: &str) -> ParamStore {
        self.sections.filter_prefix(&format!("{prefix}."))
    }

    /// SHA-256 (hex) over the encoder sections only.
    pub fn encoder_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.group("student").iter() {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        hex(&h.finalize())
    }

    /// SHA-256 (hex) of the whole file.
    pub fn file_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn array<const N: usize>(cur: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read(cur, &mut b)?;
    Ok(b)
}
