//! Named-tensor checkpoint files.
//!
//! Layout: `b"FRAP"`, version `u32`, tensor count `u32`, then per tensor the
//! name length `u32`, UTF-8 name, rank `u32`, dims `u32 × rank` and raw
//! little-endian `f32` data. All integers are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{FrappeError, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FRAP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> FrappeError {
    FrappeError::Format(msg.into())
}

pub fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut seen = HashSet::new();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(format_err(format!("duplicate tensor name {name:?}")));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| format_err(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)
        .map_err(|_| format_err("file too short for a checkpoint header"))?
        != CHECKPOINT_MAGIC
    {
        return Err(format_err("bad magic: not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format_err(format!("duplicate tensor name {name:?}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| format_err(format!("tensor {name:?} is too large")))?;
        let bytes = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| format_err("tensor too large"))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t =
            Tensor::new(&shape, data).map_err(|e| format_err(format!("tensor {name:?}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format_err(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let buf = encode_tensors(tensors)?;
    let mut f = fs::File::create(path).map_err(|e| FrappeError::io(path, e))?;
    f.write_all(&buf).map_err(|e| FrappeError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| FrappeError::io(path, e))?;
    decode_tensors(&buf)
}

/// Writes every tensor of `store` in registry order.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    save_tensors(path, store.iter().map(|(_, n, t)| (n, t)))
}

/// Reads a checkpoint into a fresh store (all tensors trainable).
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in load_tensors(path)? {
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Copies every tensor of `src` whose name exists in `dst`, checking shapes.
/// Returns the names in `dst` that `src` did not provide.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        match src.by_name(&name) {
            Some(t) => dst
                .set_value(id, t)
                .map_err(|e| format_err(format!("tensor {name:?}: {e}")))?,
            None => missing.push(name),
        }
    }
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng))
            .unwrap();
        s.insert("b", Tensor::from_fn(&[2], |i| [f32::MIN_POSITIVE, -0.0][i]))
            .unwrap();
        s.insert("c.scalar", Tensor::scalar(f32::MAX)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.frap");
        let s = sample();
        save_checkpoint(&path, &s).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), s.len());
        for (_, name, t) in s.iter() {
            let u = back.by_name(name).unwrap();
            assert_eq!(u.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(u), bits(t));
        }
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let s = sample();
        let buf = encode_tensors(s.iter().map(|(_, n, t)| (n, t))).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensors(&bad), Err(FrappeError::Format(_))));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(
            matches!(decode_tensors(&ver), Err(FrappeError::Format(m)) if m.contains("version"))
        );
        for cut in [3, 10, buf.len() - 1] {
            assert!(matches!(
                decode_tensors(&buf[..cut]),
                Err(FrappeError::Format(_))
            ));
        }
        let t = Tensor::zeros(&[1]);
        assert!(encode_tensors([("x", &t), ("x", &t)]).is_err());
        let mut dup = encode_tensors([("x", &t), ("y", &t)]).unwrap();
        let pos = dup.windows(1).rposition(|w| w == b"y").unwrap();
        dup[pos] = b'x';
        assert!(
            matches!(decode_tensors(&dup), Err(FrappeError::Format(m)) if m.contains("duplicate"))
        );
    }
}
