//! Versioned checkpoint container: named f64 arrays plus string metadata in
//! one binary file. Save -> load -> save is bit-exact; a payload digest
//! catches truncation and corruption on load.

use crate::{NnError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RPLANARC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arrays: Vec<ArrayMeta>,
    meta: BTreeMap<String, String>,
    sha256: String,
}

/// In-memory archive; arrays keep insertion order.
#[derive(Default, Debug)]
pub struct Archive {
    names: Vec<String>,
    arrays: Vec<ArrayD<f64>>,
    pub meta: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, array: ArrayD<f64>) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate archive entry {name}"
        );
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.arrays[i])
    }

    pub fn take(&mut self, name: &str) -> Option<ArrayD<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        self.names.remove(i);
        Some(self.arrays.remove(i))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data: Vec<u8> = Vec::new();
        let mut metas = Vec::new();
        for (name, arr) in self.names.iter().zip(&self.arrays) {
            let offset = data.len() / 8;
            for &v in arr.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            metas.push(ArrayMeta {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                len: arr.len(),
            });
        }
        let digest = hex_digest(&data);
        let header = Header {
            format_version: FORMAT_VERSION,
            arrays: metas,
            meta: self.meta.clone(),
            sha256: digest,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| NnError::Archive(format!("header encode: {e}")))?;

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&(data.len() as u64).to_le_bytes())?;
        f.write_all(&data)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Archive(format!(
                "{}: not a parameter archive (bad magic)",
                path.display()
            )));
        }
        let mut v4 = [0u8; 4];
        f.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != FORMAT_VERSION {
            return Err(NnError::Archive(format!(
                "{}: format version {} but this build reads version {}",
                path.display(),
                version,
                FORMAT_VERSION
            )));
        }
        let mut l8 = [0u8; 8];
        f.read_exact(&mut l8)?;
        let hlen = u64::from_le_bytes(l8) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)
            .map_err(|e| NnError::Archive(format!("{}: header decode: {e}", path.display())))?;
        f.read_exact(&mut l8)?;
        let dlen = u64::from_le_bytes(l8) as usize;
        let mut data = vec![0u8; dlen];
        f.read_exact(&mut data)?;
        if hex_digest(&data) != header.sha256 {
            return Err(NnError::Archive(format!(
                "{}: payload digest mismatch (corrupted archive)",
                path.display()
            )));
        }

        let mut out = Archive::new();
        out.meta = header.meta;
        for am in header.arrays {
            let n: usize = am.shape.iter().product::<usize>().max(1);
            if am.len != am.shape.iter().product::<usize>() || (am.offset + am.len) * 8 > dlen {
                return Err(NnError::Archive(format!(
                    "{}: entry {} out of bounds",
                    path.display(),
                    am.name
                )));
            }
            let _ = n;
            let mut vals = Vec::with_capacity(am.len);
            for i in 0..am.len {
                let s = (am.offset + i) * 8;
                vals.push(f64::from_le_bytes(data[s..s + 8].try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&am.shape), vals)
                .map_err(|e| NnError::Archive(format!("entry {}: {e}", am.name)))?;
            out.push(&am.name, arr);
        }
        Ok(out)
    }
}

fn hex_digest(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let d = h.finalize();
    let mut s = String::with_capacity(64);
    for b in d {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Dump a whole parameter store into an archive under a name prefix.
pub fn store_to_archive(
    archive: &mut Archive,
    prefix: &str,
    store: &crate::graph::ParamStore,
) {
    for id in store.ids() {
        archive.push(
            &format!("{prefix}{}", store.name(id)),
            store.value(id).clone(),
        );
    }
}

/// Restore parameters by name; every store entry must be present.
pub fn archive_to_store(
    archive: &Archive,
    prefix: &str,
    store: &mut crate::graph::ParamStore,
) -> Result<()> {
    for id in store.ids() {
        let name = format!("{prefix}{}", store.name(id));
        let arr = archive
            .get(&name)
            .ok_or_else(|| NnError::Archive(format!("missing archive entry {name}")))?;
        if arr.shape() != store.value(id).shape() {
            return Err(NnError::Archive(format!(
                "entry {name}: shape {:?} but store expects {:?}",
                arr.shape(),
                store.value(id).shape()
            )));
        }
        store.value_mut(id).assign(arr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn save_load_save_is_bit_exact() {
        let dir = std::env::temp_dir().join("replan_nn_archive_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a1.rpa");
        let p2 = dir.join("a2.rpa");

        let mut a = Archive::new();
        a.meta.insert("config".into(), "k = 1".into());
        a.push("w", arr2(&[[1.0, 2.5e-17], [-3.0, f64::MIN_POSITIVE]]).into_dyn());
        a.push("b", ndarray::arr1(&[0.1, 0.2, 0.3]).into_dyn());
        a.save(&p1).unwrap();

        let b = Archive::load(&p1).unwrap();
        assert_eq!(b.meta.get("config").map(String::as_str), Some("k = 1"));
        b.save(&p2).unwrap();

        let bytes1 = std::fs::read(&p1).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupted_archive_fails_cleanly() {
        let dir = std::env::temp_dir().join("replan_nn_archive_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("corrupt.rpa");
        let mut a = Archive::new();
        a.push("w", ndarray::arr1(&[1.0, 2.0]).into_dyn());
        a.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        let err = Archive::load(&p).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("corrupted"), "unexpected error: {msg}");
    }
}
