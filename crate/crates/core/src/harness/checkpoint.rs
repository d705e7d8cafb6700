//! Binary checkpoints.
//!
//! ```text
//! "POPT1\n"
//! u64 array count
//! per array: u64 name length, name bytes (UTF-8), u64 rank, u64 dims[rank],
//!            f64 payload[product(dims)]
//! u64 config length, config text (UTF-8 `key = value` lines)
//! ```
//!
//! Integers and reals are little-endian. Every array is stored at rank 2.

use std::io::Write;
use std::path::Path;

use super::config::Config;
use super::model::Model;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"POPT1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub config: Config,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &Config) -> Self {
        let arrays = model
            .param_names()
            .into_iter()
            .map(String::from)
            .zip(model.params().into_iter().cloned())
            .collect();
        Checkpoint {
            arrays,
            config: config.clone(),
        }
    }

    /// The stored model, configured by the stored config.
    pub fn model(&self) -> Result<Model> {
        Model::from_named(self.config.structure()?, self.config.po(), &self.arrays)
    }

    /// The stored parameters fitted to another task's structure. Fails with
    /// [`Error::Incompatible`] when the parameters cannot serve it.
    pub fn model_for(&self, task: &Config) -> Result<Model> {
        if task.task != self.config.task {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained for the {:?} task, config asks for {:?}",
                self.config.task, task.task
            )));
        }
        let po = crate::perm_optim::PoConfig {
            steps: task.steps,
            sinkhorn_iters: task.sinkhorn_iters,
            ..self.config.po()
        };
        Model::from_named(task.structure()?, po, &self.arrays)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, self.arrays.len() as u64);
        for (name, t) in &self.arrays {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, 2);
            put_u64(&mut out, t.rows() as u64);
            put_u64(&mut out, t.cols() as u64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let text = self.config.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(magic), "POPT1\\n"),
            });
        }
        let count = r.u64("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let at = r.offset;
            let len = r.len("name length")?;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(at, "array name is not UTF-8"))?
                .to_string();
            let at = r.offset;
            let rank = r.u64("rank")?;
            let dims = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [] => (1, 1),
                [c] => (1, c),
                [rows, cols] => (rows, cols),
                _ => return Err(r.error(at, &format!("array `{name}` has rank {rank}, expected at most 2"))),
            };
            let size = rows.checked_mul(cols).ok_or_else(|| r.error(at, "array too large"))?;
            let payload = r.take(size.checked_mul(8).ok_or_else(|| r.error(at, "array too large"))?, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        let at = r.offset;
        let len = r.len("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| r.error(at, "config snapshot is not UTF-8"))?;
        if r.offset != bytes.len() {
            return Err(r.error(r.offset, "trailing bytes after config snapshot"));
        }
        let config = Config::parse(text)?;
        Ok(Checkpoint { arrays, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(out)
            }
            None => Err(self.error(self.bytes.len(), &format!("truncated {what}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.offset;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len() * 8)
            .ok_or_else(|| self.error(at, &format!("implausible {what} {v}")))
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perm_optim::InitMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Model, Config) {
        let mut cfg = Config::sort();
        cfg.init_mode = InitMode::LinearAssignment;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::init(cfg.structure().unwrap(), 1, cfg.hidden, None, cfg.eta_init, cfg.po(), &mut rng).unwrap();
        model.eta = Tensor::scalar(0.1 + 0.2);
        model.net.b1.set(0, 3, -0.0);
        model.net.b1.set(0, 4, f64::MIN_POSITIVE / 3.0);
        (model, cfg)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (model, cfg) = sample();
        let ck = Checkpoint::new(&model, &cfg);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let restored = back.model().unwrap();
        for (a, b) in model.params().iter().zip(restored.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn layout_starts_with_magic_and_count() {
        let (model, cfg) = sample();
        let bytes = Checkpoint::new(&model, &cfg).encode();
        assert_eq!(&bytes[..6], b"POPT1\n");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 6);
        assert_eq!(&bytes[22..28], b"net.w1");
    }

    #[test]
    fn corrupt_input() {
        let (model, cfg) = sample();
        let mut bytes = Checkpoint::new(&model, &cfg).encode();
        let err = Checkpoint::decode(b"POPT2\n\0\0").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        bytes.push(0);
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    #[test]
    fn la_size_mismatch_is_incompatible() {
        let (model, cfg) = sample();
        let ck = Checkpoint::new(&model, &cfg);
        let mut other = cfg.clone();
        other.n = 7;
        assert!(matches!(ck.model_for(&other), Err(Error::Incompatible(_))));
        assert!(ck.model_for(&cfg).is_ok());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
