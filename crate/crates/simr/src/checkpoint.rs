//! Checkpoint wire format, version 1. All integers little-endian:
//!
//! ```text
//! magic   8 bytes  "CARZCKPT"
//! version u32
//! count   u32
//! then per tensor:
//!   name_len u16, name bytes (utf-8),
//!   ndim u8, dims ndim x u64,
//!   data prod(dims) x f32
//! ```
//!
//! The loader never panics on malformed files: every defect maps to a
//! format error carrying the byte offset where reading went wrong.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CARZCKPT";
pub const VERSION: u32 = 1;

/// Hard cap so a corrupt dim count cannot drive a huge allocation.
const MAX_NDIM: u8 = 8;
const MAX_NAME: u16 = 4096;

pub fn save(ps: &ParamSet<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(ps.len())
        .map_err(|_| Error::Contract("too many tensors for the checkpoint format".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, param) in ps.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let ndim = u8::try_from(param.shape.len())
            .map_err(|_| Error::Contract(format!("too many dims on {name}")))?;
        w.write_all(&[ndim])?;
        for &d in &param.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &param.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reader that tracks its absolute offset so errors can point at the byte
/// where the file stopped making sense.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: at,
                    detail: format!("file ends inside {what}"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn load(path: &Path) -> Result<ParamSet<f32>> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };

    let mut magic = [0u8; 8];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u32("tensor count")?;

    let mut ps = ParamSet::new();
    for t in 0..count {
        let at = r.offset;
        let name_len = r.u16("tensor name length")?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Format {
                offset: at,
                detail: format!("tensor {t}: implausible name length {name_len}"),
            });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.take(&mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: at + 2,
            detail: format!("tensor {t}: name is not valid utf-8"),
        })?;

        let at = r.offset;
        let mut ndim = [0u8];
        r.take(&mut ndim, "dim count")?;
        if ndim[0] == 0 || ndim[0] > MAX_NDIM {
            return Err(Error::Format {
                offset: at,
                detail: format!("{name}: implausible dim count {}", ndim[0]),
            });
        }
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim[0] {
            let at = r.offset;
            let d = r.u64("dimension")?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("{name}: implausible dimension {d}"),
                });
            }
            numel = numel.checked_mul(d).ok_or(Error::Format {
                offset: at,
                detail: format!("{name}: element count overflows"),
            })?;
            shape.push(d as usize);
        }
        if numel > (1 << 26) {
            return Err(Error::Format {
                offset: r.offset,
                detail: format!("{name}: {numel} elements is beyond any model this writes"),
            });
        }
        let mut data = vec![0.0f32; numel as usize];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            r.take(&mut buf, "tensor data")?;
            *v = f32::from_le_bytes(buf);
        }
        let at = r.offset;
        ps.insert(&name, &shape, data).map_err(|_| Error::Format {
            offset: at,
            detail: format!("duplicate tensor name `{name}`"),
        })?;
    }

    // trailing garbage means the writer and reader disagree on the format
    let mut extra = [0u8; 1];
    match r.inner.read(&mut extra) {
        Ok(0) => Ok(ps),
        Ok(_) => Err(Error::Format {
            offset: r.offset,
            detail: "trailing bytes after the last tensor".to_string(),
        }),
        Err(e) => Err(Error::Io(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample_params() -> ParamSet<f32> {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            n_enc: 1,
            p_raw: 4,
            l_patches: 4,
            m_len: 6,
            vocab_size: 10,
            variant: crate::alignment::SimrVariant::Linear,
            kv: crate::alignment::KvChoice::Both,
            ffn_width: None,
        };
        cfg.init_params(123).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&ps, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(ps.len(), back.len());
        for (name, p) in ps.iter() {
            let q = back.get(name).expect(name);
            assert_eq!(p.shape, q.shape, "{name}");
            assert_eq!(
                p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{name}"
            );
        }
    }

    #[test]
    fn save_is_deterministic() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&ps, &a).unwrap();
        save(&ps, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn every_truncation_point_is_a_typed_error() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&ps, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        // offsets spread over header, names, dims and payload
        let mut cuts = vec![0usize, 3, 7, 8, 9, 11, 12, 15, 16, 17, 18, 20, 25, 26, 27, 30, 40, 60];
        cuts.push(full.len() / 4);
        cuts.push(full.len() / 2);
        cuts.push(full.len() - 17);
        cuts.push(full.len() - 4);
        cuts.push(full.len() - 1);
        assert!(cuts.len() >= 20);
        let cut_path = dir.path().join("cut.ckpt");
        for cut in cuts {
            std::fs::write(&cut_path, &full[..cut]).unwrap();
            match load(&cut_path) {
                Err(Error::Format { offset, .. }) => {
                    assert!(offset <= cut as u64, "cut {cut}: offset {offset} past the cut")
                }
                Err(other) => panic!("cut {cut}: expected format error, got {other}"),
                Ok(_) => panic!("cut {cut}: load succeeded on a truncated file"),
            }
        }
    }

    #[test]
    fn corrupted_magic_and_version_are_rejected() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&ps, &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        let mut bad = full.clone();
        bad[0] ^= 0xff;
        let p = dir.path().join("bad_magic.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { offset: 0, .. })));

        let mut bad = full.clone();
        bad[8] = 99;
        let p = dir.path().join("bad_version.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { offset: 8, .. })));

        let mut bad = full;
        bad.push(0);
        let p = dir.path().join("trailing.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn implausible_dims_are_rejected_without_allocation() {
        // handcraft: magic, version, one tensor, name "w", ndim 1, dim u64::MAX
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.push(1);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("huge.ckpt");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load(&dir.path().join("nope.ckpt")),
            Err(Error::Io(_))
        ));
    }
}
