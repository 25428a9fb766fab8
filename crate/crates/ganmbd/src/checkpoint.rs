//! Checkpoint format: a text manifest (one line per tensor: name, dtype,
//! shape, byte offset) next to a single raw little-endian f32 blob.
//! Metadata (step counters, RNG position, config echoes) rides in `# key
//! value` comment lines at the top of the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// In-memory checkpoint: ordered named tensors plus string metadata.
#[derive(Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        debug_assert!(!key.contains(char::is_whitespace), "meta keys must be single tokens");
        self.meta.insert(key, value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::checkpoint(format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::checkpoint(format!("metadata key {key} has unparsable value {raw}")))
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::checkpoint(format!("tensor {name} not in checkpoint")))
    }

    /// Add every parameter of a store under `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.add_tensor(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Write every `prefix`-tensor back into a store; every store parameter
    /// must be present with a matching shape.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        for id in store.ids_with_prefix("") {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.tensor(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::checkpoint(format!(
                    "shape mismatch for {name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Save as `dir/manifest.txt` + `dir/weights.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = BufWriter::new(fs::File::create(dir.join(WEIGHTS_FILE))?);
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("# {k} {v}\n"));
        }
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::checkpoint(format!("tensor name {name:?} contains whitespace")));
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} f32 {} {offset}\n", shape.join("x")));
            for &v in t.data() {
                blob.write_all(&v.to_le_bytes())?;
            }
            offset += 4 * t.numel() as u64;
        }
        blob.flush()?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(WEIGHTS_FILE))?;
        let mut ck = Checkpoint::new();
        for (ln, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::checkpoint(format!("manifest line {}: bad meta", ln + 1)))?;
                ck.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::checkpoint(format!(
                    "manifest line {}: expected `name dtype shape offset`",
                    ln + 1
                )));
            }
            let (name, dtype, shape_s, offset_s) = (parts[0], parts[1], parts[2], parts[3]);
            if dtype != "f32" {
                return Err(Error::checkpoint(format!("unsupported dtype {dtype} for {name}")));
            }
            let shape: Vec<usize> = shape_s
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::checkpoint(format!("bad shape for {name}"))))
                .collect::<Result<_>>()?;
            let offset: usize = offset_s
                .parse()
                .map_err(|_| Error::checkpoint(format!("bad offset for {name}")))?;
            let numel: usize = shape.iter().product();
            let end = offset + 4 * numel;
            if end > blob.len() {
                return Err(Error::checkpoint(format!(
                    "blob too short for {name}: need {end} bytes, have {}",
                    blob.len()
                )));
            }
            let data: Vec<f32> = blob[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ck.add_tensor(name, Tensor::from_vec(shape, data)?);
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ck = Checkpoint::new();
        ck.set_meta("epoch", 7);
        ck.set_meta("step", 1234);
        let a = Tensor::<f32>::randn(vec![3, 4, 2, 2], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![17], 3.0, &mut rng);
        ck.add_tensor("g.layer.w", a.clone());
        ck.add_tensor("d.head.b", b.clone());

        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.meta("epoch"), Some("7"));
        assert_eq!(back.meta_parsed::<u64>("step").unwrap(), 1234);
        assert_eq!(back.tensor("g.layer.w").unwrap().data(), a.data());
        assert_eq!(back.tensor("d.head.b").unwrap().data(), b.data());
        assert_eq!(back.tensor("g.layer.w").unwrap().shape(), a.shape());
    }

    #[test]
    fn store_round_trip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let w = store.add("conv.w", Tensor::randn(vec![4, 3, 3, 3], 0.1, &mut rng));
        let b = store.add("conv.b", Tensor::randn(vec![4], 0.1, &mut rng));
        let orig_w = store.get(w).clone();
        let orig_b = store.get(b).clone();

        let mut ck = Checkpoint::new();
        ck.add_store("g.", &store);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();

        // perturb then restore
        *store.get_mut(w) = Tensor::zeros(vec![4, 3, 3, 3]);
        let back = Checkpoint::load(dir.path()).unwrap();
        back.restore_store("g.", &mut store).unwrap();
        assert_eq!(store.get(w).data(), orig_w.data());
        assert_eq!(store.get(b).data(), orig_b.data());

        // a store with a different shape refuses the checkpoint
        let mut other = ParamStore::<f32>::new();
        other.add("conv.w", Tensor::zeros(vec![5, 3, 3, 3]));
        other.add("conv.b", Tensor::zeros(vec![5]));
        assert!(back.restore_store("g.", &mut other).is_err());
    }

    #[test]
    fn missing_tensor_and_bad_manifest_are_errors() {
        let ck = Checkpoint::new();
        assert!(ck.tensor("nope").is_err());

        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "name f32 2x2 0\n").unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 8]).unwrap(); // too short
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
