//! Versioned binary checkpoint archive.
//!
//! Layout: 4-byte magic, u32 format version, u64 JSON manifest length, the
//! manifest (step counter, config, regularizer and augmentation state, RNG
//! position, tensor directory with shapes and offsets), then all tensor
//! data as little-endian f64.

use crate::ada::AdaState;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::losses::PlState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LGCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the data region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    config_toml: String,
    pl: PlState,
    ada: AdaState,
    /// ChaCha word position, split because JSON has no u128.
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    sections: Vec<(String, Vec<TensorMeta>)>,
}

/// Everything needed to resume training or to sample from a snapshot.
/// Sections group tensors by owner, e.g. "generator", "ema",
/// "discriminator", "opt_g.m", "opt_g.v", "opt_d.m", "opt_d.v".
pub struct Checkpoint<T: Elem> {
    pub step: u64,
    pub config_toml: String,
    pub sections: BTreeMap<String, Vec<(String, ArrayD<T>)>>,
    pub pl: PlState,
    pub ada: AdaState,
    pub rng_word_pos: u128,
}

impl<T: Elem> Checkpoint<T> {
    pub fn section(&self, name: &str) -> Result<&Vec<(String, ArrayD<T>)>> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metas = Vec::new();
        let mut data = Vec::<f64>::new();
        for (section, tensors) in &self.sections {
            let mut sec = Vec::new();
            for (name, arr) in tensors {
                sec.push(TensorMeta {
                    name: name.clone(),
                    shape: arr.shape().to_vec(),
                    offset: data.len() as u64,
                });
                data.extend(arr.iter().map(|v| Elem::to_f64(*v)));
            }
            metas.push((section.clone(), sec));
        }
        let manifest = Manifest {
            step: self.step,
            config_toml: self.config_toml.clone(),
            pl: self.pl,
            ada: self.ada,
            rng_word_pos_hi: (self.rng_word_pos >> 64) as u64,
            rng_word_pos_lo: self.rng_word_pos as u64,
            sections: metas,
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(&mut f);
        out.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(|e| Error::io(path, e))?;
        out.write_u64::<LittleEndian>(json.len() as u64).map_err(|e| Error::io(path, e))?;
        out.write_all(&json).map_err(|e| Error::io(path, e))?;
        for v in data {
            out.write_f64::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(f);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version} unsupported",
                path.display()
            )));
        }
        let json_len = r.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
        let mut data = Vec::new();
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        if buf.len() % 8 != 0 {
            return Err(Error::Checkpoint("truncated data region".into()));
        }
        let mut cur = std::io::Cursor::new(buf);
        while let Ok(v) = cur.read_f64::<LittleEndian>() {
            data.push(v);
        }
        let mut sections = BTreeMap::new();
        for (section, tensors) in manifest.sections {
            let mut out = Vec::new();
            for meta in tensors {
                let len: usize = meta.shape.iter().product();
                let start = meta.offset as usize;
                if start + len > data.len() {
                    return Err(Error::Checkpoint(format!("tensor {} out of bounds", meta.name)));
                }
                let arr = ArrayD::from_shape_vec(
                    IxDyn(&meta.shape),
                    data[start..start + len].iter().map(|&v| T::from_f64(v)).collect(),
                )
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", meta.name)))?;
                out.push((meta.name, arr));
            }
            sections.insert(section, out);
        }
        Ok(Checkpoint {
            step: manifest.step,
            config_toml: manifest.config_toml,
            sections,
            pl: manifest.pl,
            ada: manifest.ada,
            rng_word_pos: ((manifest.rng_word_pos_hi as u128) << 64)
                | manifest.rng_word_pos_lo as u128,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    #[test]
    fn round_trip_preserves_everything_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sections = BTreeMap::new();
        sections.insert(
            "generator".to_string(),
            vec![
                ("a.weight".to_string(), nn::randn::<f64, _>(&mut rng, &[3, 2], 1.0)),
                ("a.bias".to_string(), nn::randn::<f64, _>(&mut rng, &[3], 1.0)),
            ],
        );
        sections.insert(
            "opt_g.m".to_string(),
            vec![("a.weight".to_string(), nn::randn::<f64, _>(&mut rng, &[3, 2], 0.1))],
        );
        let ck = Checkpoint {
            step: 42,
            config_toml: "epochs = 5\n".to_string(),
            sections,
            pl: PlState { ema: 1.25, decay: 0.99 },
            ada: AdaState { p: 0.3, r_t: -0.1, ..AdaState::default() },
            rng_word_pos: (7u128 << 64) | 99,
        };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_toml, "epochs = 5\n");
        assert_eq!(loaded.pl, ck.pl);
        assert_eq!(loaded.ada, ck.ada);
        assert_eq!(loaded.rng_word_pos, ck.rng_word_pos);
        for (sec, tensors) in &ck.sections {
            let lt = loaded.section(sec).unwrap();
            assert_eq!(lt.len(), tensors.len());
            for ((n1, a1), (n2, a2)) in tensors.iter().zip(lt) {
                assert_eq!(n1, n2);
                assert_eq!(a1, a2, "tensor {n1} changed in round trip");
            }
        }
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sections = BTreeMap::new();
        sections.insert(
            "generator".to_string(),
            vec![("w".to_string(), nn::randn::<f32, _>(&mut rng, &[5, 5], 1.0))],
        );
        let ck = Checkpoint::<f32> {
            step: 1,
            config_toml: String::new(),
            sections,
            pl: PlState::new(0.99),
            ada: AdaState::default(),
            rng_word_pos: 0,
        };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(ck.sections["generator"][0].1, loaded.sections["generator"][0].1);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE............").unwrap();
        assert!(matches!(Checkpoint::<f64>::load(&path), Err(Error::Checkpoint(_))));
    }
}
