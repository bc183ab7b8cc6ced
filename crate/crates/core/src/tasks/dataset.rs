//! On-disk dataset format for the recall task.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MQAR"
//! version u32      1
//! vocab, num_pairs, num_queries, seq_len, num_instances   u32 each
//! seed    u64
//! crc32   u32      over the payload bytes
//! payload          tokens as u16, row-major (num_instances x seq_len),
//!                  then the mask packed LSB-first
//! ```
//!
//! Targets are not stored: they are a pure function of the tokens (see
//! [`derive_supervision`]), and the loader cross-checks the stored mask
//! against the derived one, so any corruption the checksum misses still
//! fails loudly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KernelError, Result};

use super::mqar::{derive_supervision, generate_instance, MqarConfig};

const MAGIC: [u8; 4] = *b"MQAR";
const VERSION: u32 = 1;

/// A materialized set of task instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub cfg: MqarConfig,
    pub seed: u64,
    num_instances: usize,
    tokens: Vec<u16>,
    targets: Vec<u16>,
    mask: Vec<bool>,
}

impl Dataset {
    /// Materialize instances `0..num_instances` of stream `seed`.
    pub fn generate(cfg: &MqarConfig, seed: u64, num_instances: usize) -> Result<Dataset> {
        cfg.validate()?;
        if num_instances == 0 {
            return Err(KernelError::contract("dataset", "num_instances must be positive"));
        }
        let mut tokens = Vec::with_capacity(num_instances * cfg.seq_len);
        let mut targets = Vec::with_capacity(num_instances * cfg.seq_len);
        let mut mask = Vec::with_capacity(num_instances * cfg.seq_len);
        for i in 0..num_instances {
            let inst = generate_instance(cfg, seed, i as u64)?;
            tokens.extend_from_slice(&inst.tokens);
            targets.extend_from_slice(&inst.targets);
            mask.extend_from_slice(&inst.mask);
        }
        Ok(Dataset { cfg: *cfg, seed, num_instances, tokens, targets, mask })
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    /// `(tokens, targets, mask)` of instance `i`.
    pub fn instance(&self, i: usize) -> (&[u16], &[u16], &[bool]) {
        let s = self.cfg.seq_len;
        (
            &self.tokens[i * s..(i + 1) * s],
            &self.targets[i * s..(i + 1) * s],
            &self.mask[i * s..(i + 1) * s],
        )
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(self.tokens.len() * 2 + self.mask.len() / 8 + 1);
        for &t in &self.tokens {
            p.extend_from_slice(&t.to_le_bytes());
        }
        let mut byte = 0u8;
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                p.push(byte);
                byte = 0;
            }
        }
        if self.mask.len() % 8 != 0 {
            p.push(byte);
        }
        p
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| KernelError::io("dataset write", e);
        let payload = self.payload();
        let crc = crc32fast::hash(&payload);
        w.write_all(&MAGIC).map_err(io)?;
        for v in [
            VERSION,
            self.cfg.vocab as u32,
            self.cfg.num_pairs as u32,
            self.cfg.num_queries as u32,
            self.cfg.seq_len as u32,
            self.num_instances as u32,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&self.seed.to_le_bytes()).map_err(io)?;
        w.write_all(&crc.to_le_bytes()).map_err(io)?;
        w.write_all(&payload).map_err(io)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset> {
        let io = |e| KernelError::io("dataset read", e);
        let fmt = |d: String| KernelError::format("dataset", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}, expected {VERSION}")));
        }
        let vocab = read_u32(r)? as usize;
        let num_pairs = read_u32(r)? as usize;
        let num_queries = read_u32(r)? as usize;
        let seq_len = read_u32(r)? as usize;
        let num_instances = read_u32(r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io)?;
        let seed = u64::from_le_bytes(u64buf);
        let crc_stored = read_u32(r)?;

        let cfg = MqarConfig { vocab, num_pairs, num_queries, seq_len };
        cfg.validate()?;
        if num_instances == 0 {
            return Err(fmt("zero instances".into()));
        }
        let n = num_instances * seq_len;
        let payload_len = n * 2 + n.div_ceil(8);
        let mut payload = vec![0u8; payload_len];
        r.read_exact(&mut payload).map_err(io)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(fmt("trailing bytes after payload".into()));
        }
        let crc = crc32fast::hash(&payload);
        if crc != crc_stored {
            return Err(fmt(format!(
                "checksum mismatch: stored {crc_stored:#010x}, computed {crc:#010x}"
            )));
        }

        let tokens: Vec<u16> = payload[..n * 2]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let mask_bytes = &payload[n * 2..];
        let mask: Vec<bool> = (0..n).map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1).collect();

        let mut targets = Vec::with_capacity(n);
        for i in 0..num_instances {
            let row = &tokens[i * seq_len..(i + 1) * seq_len];
            let (t, m) = derive_supervision(&cfg, row)
                .map_err(|e| fmt(format!("instance {i}: {e}")))?;
            if m != mask[i * seq_len..(i + 1) * seq_len] {
                return Err(fmt(format!(
                    "instance {i}: stored mask disagrees with token structure"
                )));
            }
            targets.extend_from_slice(&t);
        }
        Ok(Dataset { cfg, seed, num_instances, tokens, targets, mask })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)
            .map_err(|e| KernelError::io(format!("create {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| KernelError::io("dataset write", e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let f = File::open(path)
            .map_err(|e| KernelError::io(format!("open {}", path.display()), e))?;
        Dataset::read_from(&mut BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| KernelError::io("dataset read", e))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let cfg = MqarConfig { vocab: 16, num_pairs: 3, num_queries: 2, seq_len: 13 };
        Dataset::generate(&cfg, 77, 9).unwrap()
    }

    #[test]
    fn roundtrip_preserves_every_field_and_byte() {
        let ds = small();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(ds, back);
        // Re-serialization is byte-identical.
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn file_roundtrip_via_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.bin");
        let ds = small();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn instances_match_direct_generation() {
        let ds = small();
        for i in 0..ds.num_instances() {
            let inst = generate_instance(&ds.cfg, ds.seed, i as u64).unwrap();
            let (t, g, m) = ds.instance(i);
            assert_eq!(t, inst.tokens);
            assert_eq!(g, inst.targets);
            assert_eq!(m, inst.mask);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let ds = small();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::read_from(&mut bad.as_slice()),
            Err(KernelError::Format { .. })
        ));

        let mut bad = bytes.clone();
        bad[4] = 9; // version
        assert!(Dataset::read_from(&mut bad.as_slice()).is_err());

        // Flip one payload byte: checksum must catch it.
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xFF;
        let err = Dataset::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        // Truncation fails before any checksum comparison.
        let bad = &bytes[..bytes.len() - 3];
        assert!(Dataset::read_from(&mut &bad[..]).is_err());

        // Trailing garbage is not silently ignored.
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(Dataset::read_from(&mut bad.as_slice()).is_err());
    }
}
