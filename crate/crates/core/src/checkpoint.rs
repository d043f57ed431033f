//! `.lpck` checkpoint files and the on-disk experiment layout.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "LPCK"  u32 version
//! u32 spec_len, spec_len bytes of canonical spec string
//! u64 seed, u64 iteration, u8 precision tag
//! u32 tensor count, then per tensor:
//!     u16 name_len, name bytes, u8 role tag, u8 ndim, ndim x u64 dims, u64 offset
//! u64 value count P, then P values (f32 or f64)
//! u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    manifest_for, Manifest, ModelSpec, ParamVector, Precision, Role, TensorInfo, Values,
};
use crate::trainer::{Checkpoint, Hyperparams};

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "lpck";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Canonical byte encoding of a checkpoint.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let manifest = ckpt.params.manifest();
    let spec = ckpt.spec.canonical();
    let mut b =
        Vec::with_capacity(64 + spec.len() + ckpt.params.len() * ckpt.precision().element_size());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    b.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    b.extend_from_slice(spec.as_bytes());
    b.extend_from_slice(&ckpt.seed.to_le_bytes());
    b.extend_from_slice(&ckpt.iteration.to_le_bytes());
    b.push(ckpt.precision().tag());
    b.extend_from_slice(&(manifest.tensors().len() as u32).to_le_bytes());
    for t in manifest.tensors() {
        b.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        b.extend_from_slice(t.name.as_bytes());
        b.push(t.role.tag());
        b.push(t.shape.len() as u8);
        for &d in &t.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        b.extend_from_slice(&(t.offset as u64).to_le_bytes());
    }
    b.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    match ckpt.params.values() {
        Values::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
        Values::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::Integrity("size does not fit in memory".into()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Integrity("invalid UTF-8 string".into()))
    }
}

/// Decodes and validates a checkpoint: magic, then version, then CRC, then
/// the manifest against the embedded spec.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::NotCheckpoint);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Corrupt { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let spec_len = r.u32()? as usize;
    let spec = ModelSpec::parse_canonical(r.str(spec_len)?)
        .map_err(|e| Error::Integrity(format!("embedded spec: {e}")))?;
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let tag = r.u8()?;
    let precision = Precision::from_tag(tag)
        .ok_or_else(|| Error::Integrity(format!("unknown precision tag {tag}")))?;
    if precision != spec.precision {
        return Err(Error::Integrity(format!(
            "precision tag {precision} disagrees with spec precision {}",
            spec.precision
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.str(name_len)?.to_string();
        let role_tag = r.u8()?;
        let role = Role::from_tag(role_tag)
            .ok_or_else(|| Error::Integrity(format!("unknown role tag {role_tag}")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let offset = r.usize()?;
        tensors.push(TensorInfo {
            name,
            role,
            shape,
            offset,
        });
    }
    let manifest = Manifest::from_entries(tensors).map_err(|e| Error::Integrity(e.to_string()))?;
    let expected = manifest_for(&spec).map_err(|e| Error::Integrity(e.to_string()))?;
    if manifest != expected {
        return Err(Error::Integrity(
            "tensor manifest does not match the embedded spec".into(),
        ));
    }
    let p = r.usize()?;
    if p != manifest.len() {
        return Err(Error::Integrity(format!(
            "value count {p} does not match manifest size {}",
            manifest.len()
        )));
    }
    let payload_len = p
        .checked_mul(precision.element_size())
        .ok_or_else(|| Error::Integrity("payload size overflow".into()))?;
    let payload = r.take(payload_len)?;
    if r.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    let values = match precision {
        Precision::F32 => Values::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Precision::F64 => Values::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let params = ParamVector::new(Arc::new(manifest), values)?;
    Ok(Checkpoint::new(iteration, seed, spec, params))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(ckpt))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Directory of one replicate: `<root>/<experiment>/<seed>`.
pub fn replicate_dir(root: &Path, experiment: &str, seed: u64) -> PathBuf {
    root.join(experiment).join(seed.to_string())
}

pub fn checkpoint_path(root: &Path, experiment: &str, seed: u64, iteration: u64) -> PathBuf {
    replicate_dir(root, experiment, seed).join(format!("ckpt_{iteration}.{EXTENSION}"))
}

/// Per-replicate record of how the checkpoints were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    /// Canonical model spec string.
    pub spec: String,
    /// Hex form of the spec hash.
    pub spec_hash: String,
    pub hyperparams: Hyperparams,
    pub schedule: Vec<u64>,
    /// CRC32 of the training set, hex.
    pub dataset_digest: String,
    /// Iterations whose checkpoint files are complete.
    pub completed: Vec<u64>,
}

impl RunManifest {
    pub fn path(root: &Path, experiment: &str, seed: u64) -> PathBuf {
        replicate_dir(root, experiment, seed).join(RUN_MANIFEST_FILE)
    }

    pub fn is_complete(&self) -> bool {
        self.completed == self.schedule
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, InputShape};

    fn sample(precision: Precision) -> Checkpoint {
        let spec = ModelSpec::mlp(InputShape::Flat(5), &[4], 3).with_precision(precision);
        let params = build_model(&spec, 9).unwrap();
        Checkpoint::new(16, 9, spec, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for p in [Precision::F32, Precision::F64] {
            let c = sample(p);
            let path = dir.path().join(format!("c_{p}.lpck"));
            save(&c, &path).unwrap();
            let back = load(&path).unwrap();
            assert!(back.bit_eq(&c));
            assert_eq!(fs::read(&path).unwrap(), encode(&back));
        }
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let mut b = encode(&sample(Precision::F32));
        let last_payload = b.len() - 5;
        b[last_payload] ^= 0x01;
        assert!(matches!(decode(&b), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let b = encode(&sample(Precision::F32));
        let mut m = b.clone();
        m[0] = b'X';
        assert!(matches!(decode(&m), Err(Error::NotCheckpoint)));
        assert_eq!(decode(&m).unwrap_err().to_string(), "not a checkpoint file");
        let mut v = b.clone();
        v[4..8].copy_from_slice(&255u32.to_le_bytes());
        assert!(matches!(decode(&v), Err(Error::Version(255))));
        assert!(matches!(decode(b"LP"), Err(Error::NotCheckpoint)));
    }

    /// Re-seals a modified body with a fresh CRC.
    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        body
    }

    #[test]
    fn manifest_spec_mismatch_is_integrity_error() {
        let c = sample(Precision::F32);
        let b = encode(&c);
        let mut body = b[..b.len() - 4].to_vec();
        // Rename the first tensor ("fc0.weight" -> "fc9.weight").
        let spec_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let name_at = 12 + spec_len + 8 + 8 + 1 + 4 + 2;
        assert_eq!(&body[name_at..name_at + 3], b"fc0");
        body[name_at + 2] = b'9';
        assert!(matches!(decode(&reseal(body)), Err(Error::Integrity(_))));

        // Truncated payload with a valid CRC.
        let body = b[..b.len() - 8].to_vec();
        assert!(matches!(decode(&reseal(body)), Err(Error::Integrity(_))));
    }

    #[test]
    fn layout_paths() {
        let p = checkpoint_path(Path::new("runs"), "mnist", 2, 1024);
        assert_eq!(p, Path::new("runs/mnist/2/ckpt_1024.lpck"));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/x.bin");
        write_atomic(&path, b"hello").unwrap();
        write_atomic(&path, b"world").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"world");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
