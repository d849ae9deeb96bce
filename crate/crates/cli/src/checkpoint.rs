//! The single versioned binary container: `MGCT` magic, format version,
//! a kind tag, and a kind-dependent payload. Checkpoints carry the
//! resolved config snapshot, the optimizer step, and an indexed set of
//! named tensors; feature files carry one `[T, d]` frame matrix.
//! All scalars little-endian; tensor payloads are raw `f32` bits, so a
//! save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use maskcodec_core::nn::Params;
use maskcodec_core::Tensor;

pub const MAGIC: &[u8; 4] = b"MGCT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    SemanticCodec = 1,
    AcousticCodec = 2,
    T2s = 3,
    S2a = 4,
    Duration = 5,
    Features = 6,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::SemanticCodec => "semantic_codec",
            Kind::AcousticCodec => "acoustic_codec",
            Kind::T2s => "t2s",
            Kind::S2a => "s2a",
            Kind::Duration => "duration",
            Kind::Features => "features",
        }
    }

    fn from_u8(v: u8) -> Result<Kind> {
        Ok(match v {
            1 => Kind::SemanticCodec,
            2 => Kind::AcousticCodec,
            3 => Kind::T2s,
            4 => Kind::S2a,
            5 => Kind::Duration,
            6 => Kind::Features,
            other => bail!("unknown container kind {other}"),
        })
    }
}

/// A deserialized checkpoint: config snapshot, optimizer step, tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: Kind,
    pub config_text: String,
    pub step: u64,
    pub params: Params,
}

pub fn save_checkpoint(
    path: &Path,
    kind: Kind,
    config_text: &str,
    step: u64,
    params: &Params,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind as u8);
    write_bytes(&mut buf, config_text.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());

    let named: Vec<(&str, &Tensor)> = params
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain(extra.iter().map(|(n, t)| (n.as_str(), t)))
        .collect();
    buf.extend_from_slice(&(named.len() as u64).to_le_bytes());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        write_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(&blob);

    write_atomically(path, &buf)
}

/// Load any checkpoint-kind container. Optimizer moment tensors ride in
/// `params` under their `opt.` prefix; callers that resume feed them to
/// the optimizer, everyone else ignores them.
pub fn load_checkpoint(path: &Path, expect: Kind) -> Result<Checkpoint> {
    let data = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut r = Reader { data: &data, at: 0 };
    let kind = read_header(&mut r, path)?;
    if kind == Kind::Features {
        bail!("{} is a feature file, not a {} checkpoint", path.display(), expect.name());
    }
    if kind != expect {
        bail!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            kind.name(),
            expect.name()
        );
    }
    let config_text = String::from_utf8(r.bytes()?.to_vec()).context("config snapshot not UTF-8")?;
    let step = r.u64()?;
    let count = r.u64()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec()).context("tensor name not UTF-8")?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let offset = r.u64()? as usize;
        index.push((name, rows, cols, offset));
    }
    let blob = r.bytes()?;
    let mut params = Params::new();
    for (name, rows, cols, offset) in index {
        let n = rows * cols;
        let end = offset + 4 * n;
        if end > blob.len() {
            bail!("tensor `{name}` runs past the payload");
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = &blob[offset + 4 * i..offset + 4 * i + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        params.insert(&name, Tensor::new(rows, cols, data));
    }
    Ok(Checkpoint { kind, config_text, step, params })
}

/// Peek at a container's kind without loading the payload.
pub fn peek_kind(path: &Path) -> Result<Kind> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut head = [0u8; 9];
    file.read_exact(&mut head)
        .with_context(|| format!("{} is too short", path.display()))?;
    let mut r = Reader { data: &head, at: 0 };
    read_header(&mut r, path)
}

pub fn save_features(path: &Path, frames: &Tensor) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(Kind::Features as u8);
    buf.extend_from_slice(&(frames.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u64).to_le_bytes());
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomically(path, &buf)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let data = std::fs::read(path)
        .with_context(|| format!("reading feature file {}", path.display()))?;
    let mut r = Reader { data: &data, at: 0 };
    let kind = read_header(&mut r, path)?;
    if kind != Kind::Features {
        bail!("{} holds a {} checkpoint, not features", path.display(), kind.name());
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let n = rows * cols;
    let rest = r.rest();
    if rest.len() != 4 * n {
        bail!("feature payload is {} bytes, expected {}", rest.len(), 4 * n);
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let b = &rest[4 * i..4 * i + 4];
        values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    }
    Ok(Tensor::new(rows, cols, values))
}

fn read_header(r: &mut Reader<'_>, path: &Path) -> Result<Kind> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        bail!("{} is not a container file (bad magic)", path.display());
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(
            "{} has format version {version}, this build reads only {VERSION}",
            path.display()
        );
    }
    Kind::from_u8(r.take(1)?[0])
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("moving {} into place", tmp.display()))?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            bail!("container truncated at byte {}", self.at);
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.data[self.at..];
        self.at = self.data.len();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskcodec_core::rng::RngState;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = RngState::new(1);
        let mut params = Params::new();
        params.insert("a.w", Tensor::randn(3, 5, 1.0, &mut rng));
        params.insert("b.v", Tensor::randn(1, 7, 0.1, &mut rng));
        save_checkpoint(&path, Kind::T2s, "t2s.layers=2\n", 42, &params, &[]).unwrap();
        let ck = load_checkpoint(&path, Kind::T2s).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.config_text, "t2s.layers=2\n");
        for (name, tensor) in params.iter() {
            let loaded = ck.params.get(name).unwrap();
            assert_eq!(tensor.shape(), loaded.shape());
            // Bit-exact comparison.
            for (a, b) in tensor.data().iter().zip(loaded.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = Params::new();
        save_checkpoint(&path, Kind::S2a, "", 0, &params, &[]).unwrap();
        assert!(load_checkpoint(&path, Kind::T2s).is_err());
        assert_eq!(peek_kind(&path).unwrap(), Kind::S2a);
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = Params::new();
        save_checkpoint(&path, Kind::T2s, "", 0, &params, &[]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // poke the version low byte
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path, Kind::T2s).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut rng = RngState::new(2);
        let frames = Tensor::randn(11, 4, 1.0, &mut rng);
        save_features(&path, &frames).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(frames, back);
        // Feature files are not checkpoints.
        assert!(load_checkpoint(&path, Kind::T2s).is_err());
    }
}
