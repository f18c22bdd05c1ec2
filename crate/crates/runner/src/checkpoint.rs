//! Checkpoint container: `manifest.json` describing named little-endian
//! arrays stored back to back in `arrays.bin`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const ARRAYS: &str = "arrays.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into `arrays.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration: u64,
    pub config_hash: String,
    pub byte_order: String,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

/// Parameters, walkers and generator states of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config_hash: String,
    pub arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Checkpoint {
    pub fn new(iteration: u64, config_hash: String) -> Self {
        Self {
            iteration,
            config_hash,
            arrays: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.to_string(), shape.to_vec(), ArrayData::F64(data)));
    }

    pub fn push_u64(&mut self, name: &str, shape: &[usize], data: Vec<u64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.to_string(), shape.to_vec(), ArrayData::U64(data)));
    }

    fn get(&self, name: &str) -> Result<&(String, Vec<usize>, ArrayData)> {
        self.arrays.iter().find(|a| a.0 == name).with_context(|| format!("checkpoint has no array `{name}`"))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            (_, shape, ArrayData::F64(v)) => Ok((shape, v)),
            _ => bail!("checkpoint array `{name}` is not f64"),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<(&[usize], &[u64])> {
        match self.get(name)? {
            (_, shape, ArrayData::U64(v)) => Ok((shape, v)),
            _ => bail!("checkpoint array `{name}` is not u64"),
        }
    }

    /// Writes into `dir`, replacing an existing checkpoint only once both
    /// files are complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut bin = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in &self.arrays {
            let offset = bin.len() as u64;
            let dtype = match data {
                ArrayData::F64(v) => {
                    v.iter().for_each(|x| bin.extend_from_slice(&x.to_le_bytes()));
                    Dtype::F64
                }
                ArrayData::U64(v) => {
                    v.iter().for_each(|x| bin.extend_from_slice(&x.to_le_bytes()));
                    Dtype::U64
                }
            };
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype,
                shape: shape.clone(),
                offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            byte_order: "little".into(),
            arrays: entries,
        };
        let tmp_bin = dir.join(format!("{ARRAYS}.tmp"));
        let tmp_man = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp_bin, &bin)?;
        fs::write(&tmp_man, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp_bin, dir.join(ARRAYS))?;
        fs::rename(&tmp_man, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&man_path).with_context(|| format!("reading {}", man_path.display()))?)
            .with_context(|| format!("parsing {}", man_path.display()))?;
        ensure!(
            manifest.format_version == FORMAT_VERSION,
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        );
        ensure!(manifest.byte_order == "little", "unsupported byte order `{}`", manifest.byte_order);
        let bin = fs::read(dir.join(ARRAYS)).with_context(|| format!("reading {}", dir.join(ARRAYS).display()))?;
        let mut arrays = Vec::new();
        for e in &manifest.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            ensure!(end <= bin.len(), "array `{}` runs past the end of {ARRAYS}", e.name);
            let words = bin[start..end].chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
            let data = match e.dtype {
                Dtype::F64 => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                Dtype::U64 => ArrayData::U64(words.map(u64::from_le_bytes).collect()),
            };
            arrays.push((e.name.clone(), e.shape.clone(), data));
        }
        Ok(Self {
            iteration: manifest.iteration,
            config_hash: manifest.config_hash,
            arrays,
        })
    }
}

/// Generator state as seven words: key (4), stream, word position (lo, hi).
pub fn rng_words(rng: &ChaCha8Rng) -> [u64; 7] {
    let seed = rng.get_seed();
    let k = |i: usize| u64::from_le_bytes(seed[8 * i..8 * i + 8].try_into().unwrap());
    let pos = rng.get_word_pos();
    [k(0), k(1), k(2), k(3), rng.get_stream(), pos as u64, (pos >> 64) as u64]
}

pub fn rng_from_words(w: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for i in 0..4 {
        seed[8 * i..8 * i + 8].copy_from_slice(&w[i].to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | (w[6] as u128) << 64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new(17, "abc".into());
        c.push_f64("params", &[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI, -2.5]);
        c.push_u64("rng", &[1, 7], vec![u64::MAX, 0, 1, 2, 3, 4, 5]);
        c.save(dir.path()).unwrap();
        let d = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(c, d);
        let (_, p) = d.f64s("params").unwrap();
        assert_eq!(p[1].to_bits(), (-0.0f64).to_bits());
        assert!(d.f64s("rng").is_err());
        assert!(d.u64s("missing").is_err());
    }

    #[test]
    fn rng_state_survives_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(5);
        for _ in 0..13 {
            rng.gen::<u32>();
        }
        let mut copy = rng_from_words(&rng_words(&rng));
        for _ in 0..100 {
            assert_eq!(rng.gen::<u64>(), copy.gen::<u64>());
        }
    }

    #[test]
    fn newer_format_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(0, "h".into()).save(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&p, text).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
