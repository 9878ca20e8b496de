//! Content-addressed activation cache.
//!
//! Entries are keyed by (backend fingerprint, prompt token ids, probe
//! point); a fingerprint mismatch or a corrupt file invalidates the entry
//! and the activation is recomputed and rewritten. Cache hits are
//! bit-exact: the stored vector equals a fresh forward pass.

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::backend::{ActivationProbePoint, TokenPosition, WhiteBoxBackend};
use crate::token::TokenSequence;

const MAGIC: &[u8; 4] = b"ACTV";
const VERSION: u32 = 1;

/// Filesystem-backed activation cache rooted at one directory.
pub struct ActivationCache {
    root: PathBuf,
}

impl ActivationCache {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.actv"))
    }

    fn key(fingerprint: &str, prompt: &TokenSequence, essay_end: Option<usize>, point: ActivationProbePoint) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.as_bytes());
        h.update([0xff]);
        for &id in &prompt.ids {
            h.update(id.to_le_bytes());
        }
        h.update([0xfe]);
        h.update((essay_end.map(|e| e as u64 + 1).unwrap_or(0)).to_le_bytes());
        h.update((point.layer_index as u64).to_le_bytes());
        let pos_tag: (u8, u64) = match point.token_position {
            TokenPosition::EndOfEssay => (0, 0),
            TokenPosition::EndOfInput => (1, 0),
            TokenPosition::Explicit(i) => (2, i as u64),
        };
        h.update([pos_tag.0]);
        h.update(pos_tag.1.to_le_bytes());
        hex(&h.finalize())
    }

    /// Returns the activation at `point`, recomputing on miss or stale
    /// entry. The boolean is true on a cache hit.
    pub fn get_or_compute(
        &self,
        backend: &dyn WhiteBoxBackend,
        prompt: &TokenSequence,
        essay_end: Option<usize>,
        point: ActivationProbePoint,
    ) -> Result<(Array1<f64>, bool), StoreError> {
        let fingerprint = backend.fingerprint();
        let key = Self::key(&fingerprint, prompt, essay_end, point);
        let path = self.entry_path(&key);
        if path.exists() {
            match read_entry(&path, &fingerprint) {
                Ok(v) => return Ok((v, true)),
                Err(StoreError::StaleCache(_)) => {
                    // fall through to recompute and overwrite
                }
                Err(e) => return Err(e),
            }
        }
        let acts = backend.forward_with_capture_at(prompt, essay_end, &[point])?;
        let v = acts.get(&point).expect("requested point present").clone();
        std::fs::create_dir_all(&self.root)?;
        write_entry(&path, &fingerprint, &v)?;
        Ok((v, false))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_entry(path: &Path, fingerprint: &str, v: &Array1<f64>) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u32::<LittleEndian>(fingerprint.len() as u32)?;
    buf.write_all(fingerprint.as_bytes())?;
    buf.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        buf.write_f64::<LittleEndian>(x)?;
    }
    // write via a temp file so concurrent readers never see a torn entry
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Decodes one cache entry, checking magic, version, and fingerprint.
pub(crate) fn read_entry(path: &Path, fingerprint: &str) -> Result<Array1<f64>, StoreError> {
    let bytes = std::fs::read(path)?;
    decode_entry(&bytes, fingerprint)
        .map_err(|e| StoreError::StaleCache(format!("{}: {e}", path.display())))
}

/// Decodes cache-entry bytes; any malformation is reported as the reason
/// string of a stale entry.
pub fn decode_entry(bytes: &[u8], fingerprint: &str) -> Result<Array1<f64>, String> {
    let stale = |why: &str| why.to_string();
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| stale("truncated header"))?;
    if &magic != MAGIC {
        return Err(stale("bad magic"));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| stale("truncated version"))?;
    if version != VERSION {
        return Err(stale("unknown version"));
    }
    let fp_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| stale("truncated fingerprint length"))? as usize;
    let mut fp = vec![0u8; fp_len];
    cur.read_exact(&mut fp)
        .map_err(|_| stale("truncated fingerprint"))?;
    if fp != fingerprint.as_bytes() {
        return Err(stale("backend fingerprint mismatch"));
    }
    let len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| stale("truncated length"))? as usize;
    let remaining = bytes.len() as u64 - cur.position();
    if (len as u64).checked_mul(8).map(|n| n > remaining).unwrap_or(true) {
        return Err(stale("length exceeds payload"));
    }
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(
            cur.read_f64::<LittleEndian>()
                .map_err(|_| stale("truncated data"))?,
        );
    }
    if cur.position() != bytes.len() as u64 {
        return Err(stale("trailing bytes"));
    }
    Ok(Array1::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyConfig, ToyTransformer};
    use crate::token::{Tokenizer, ToyTokenizer};

    fn config(seed: u64) -> ToyConfig {
        ToyConfig {
            vocab_size: 128,
            hidden_dim: 16,
            depth: 2,
            max_seq_len: 64,
            mlp_hidden: 32,
            seed,
        }
    }

    fn backend() -> ToyTransformer {
        ToyTransformer::new("cache-test", config(41), ToyTokenizer::ascii())
    }

    fn point() -> ActivationProbePoint {
        ActivationProbePoint {
            layer_index: 1,
            token_position: TokenPosition::EndOfInput,
        }
    }

    #[test]
    fn second_invocation_is_a_hit_with_identical_bytes() {
        let b = backend();
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::new(dir.path());
        let prompt = b.tokenizer.encode("score this essay");
        let (v1, hit1) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        let (v2, hit2) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        assert!(!hit1);
        assert!(hit2);
        assert_eq!(v1, v2);
        // bit-exact against a forced recomputation
        let fresh = b
            .forward_with_capture_at(&prompt, None, &[point()])
            .unwrap();
        assert_eq!(v2, fresh[&point()]);
    }

    #[test]
    fn corrupt_entry_is_stale_and_recomputed() {
        let b = backend();
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::new(dir.path());
        let prompt = b.tokenizer.encode("essay");
        let (v1, _) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        // corrupt the single entry on disk
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().map(|e| e == "actv").unwrap_or(false))
            .unwrap();
        std::fs::write(&entry, b"garbage").unwrap();
        assert!(matches!(
            read_entry(&entry, &b.fingerprint()),
            Err(StoreError::StaleCache(_))
        ));
        let (v2, hit) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        assert!(!hit, "corrupt entry must trigger recomputation");
        assert_eq!(v1, v2);
        // the repaired entry is a hit again
        let (_, hit3) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        assert!(hit3);
    }

    #[test]
    fn fingerprint_mismatch_is_stale() {
        let b = backend();
        let other = ToyTransformer::new("cache-test-2", config(42), ToyTokenizer::ascii());
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::new(dir.path());
        let prompt = b.tokenizer.encode("essay");
        cache.get_or_compute(&b, &prompt, None, point()).unwrap();
        // same prompt through a different model keys differently, so both
        // coexist; a direct read with the wrong fingerprint is stale
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().map(|e| e == "actv").unwrap_or(false))
            .unwrap();
        assert!(matches!(
            read_entry(&entry, &other.fingerprint()),
            Err(StoreError::StaleCache(_))
        ));
    }

    #[test]
    fn readback_equals_recomputation_on_many_prompts() {
        let b = backend();
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::new(dir.path());
        for i in 0..10 {
            let prompt = b.tokenizer.encode(&format!("essay number {i}"));
            let (cold, _) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
            let (warm, hit) = cache.get_or_compute(&b, &prompt, None, point()).unwrap();
            assert!(hit);
            assert_eq!(cold, warm);
        }
    }
}
