//! Binary parameter container shared by all checkpoints.
//!
//! Layout: 4 magic bytes, format version `u32`, resolution `u32`, then
//! named blocks until EOF — each block is name length `u16`, name bytes,
//! rank `u8`, one `u32` per dimension, then the values as 32-bit IEEE-754,
//! everything little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VERSION: u32 = 1;

pub const MAGIC_GENERATOR: [u8; 4] = *b"XSWG";
pub const MAGIC_ENCODER: [u8; 4] = *b"XSWE";
pub const MAGIC_MAPPER: [u8; 4] = *b"XSWM";
pub const MAGIC_DATASET: [u8; 4] = *b"XSWD";

#[derive(Debug, Clone)]
pub struct Block {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Block {
    pub fn from_array<F: Scalar>(a: &ArrayD<F>) -> Self {
        Block {
            dims: a.shape().to_vec(),
            values: a.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn to_array<F: Scalar>(&self) -> ArrayD<F> {
        ArrayD::from_shape_vec(
            IxDyn(&self.dims),
            self.values.iter().map(|&v| F::from_f32(v)).collect(),
        )
        .expect("block dims consistent with value count")
    }

    pub fn scalar_u64(&self) -> u64 {
        self.values[0] as u64
    }
}

#[derive(Debug)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub resolution: u32,
    pub blocks: BTreeMap<String, Block>,
}

impl Container {
    pub fn new(magic: [u8; 4], resolution: u32) -> Self {
        Container {
            magic,
            version: VERSION,
            resolution,
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert_array<F: Scalar>(&mut self, name: impl Into<String>, a: &ArrayD<F>) {
        self.blocks.insert(name.into(), Block::from_array(a));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.blocks.insert(
            name.into(),
            Block {
                dims: vec![1],
                values: vec![v as f32],
            },
        );
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.blocks.insert(
            name.into(),
            Block {
                dims: vec![bytes.len()],
                values: bytes.iter().map(|&b| b as f32).collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Block> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::format(format!("missing block `{name}`")))
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        Ok(self.get(name)?.values.iter().map(|&v| v as u8).collect())
    }

    /// Loads every `(name, array)` pair of a model from same-named blocks.
    pub fn load_into<F: Scalar>(
        &self,
        params: Vec<(String, &mut ArrayD<F>)>,
        prefix: &str,
    ) -> Result<()> {
        for (name, p) in params {
            let key = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}.{name}")
            };
            let block = self.get(&key)?;
            if block.dims != p.shape() {
                return Err(Error::format(format!(
                    "block `{key}` has dims {:?}, expected {:?}",
                    block.dims,
                    p.shape()
                )));
            }
            *p = block.to_array();
        }
        Ok(())
    }

    pub fn store_params<F: Scalar>(&mut self, params: Vec<(String, &ArrayD<F>)>, prefix: &str) {
        for (name, p) in params {
            let key = if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            };
            self.insert_array(key, p);
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.magic)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.resolution.to_le_bytes())?;
        for (name, block) in &self.blocks {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[block.dims.len() as u8])?;
            for &d in &block.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &block.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>, expect_magic: [u8; 4]) -> Result<Container> {
        let path = path.as_ref();
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::state(format!("{}: {e}", path.display())))?,
        );
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated header: missing magic"))?;
        if magic != expect_magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expect_magic)
            )));
        }
        let version = read_u32(&mut r).map_err(|_| Error::format("truncated header: version"))?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let resolution =
            read_u32(&mut r).map_err(|_| Error::format("truncated header: resolution"))?;

        let mut blocks = BTreeMap::new();
        loop {
            let mut lenb = [0u8; 2];
            match r.read(&mut lenb)? {
                0 => break,
                2 => {}
                _ => return Err(Error::format("truncated block: name length")),
            }
            let name_len = u16::from_le_bytes(lenb) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::format("truncated block: name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("block name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)
                .map_err(|_| Error::format(format!("truncated block `{name}`: rank")))?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            let mut count = 1usize;
            for _ in 0..rank[0] {
                let d = read_u32(&mut r)
                    .map_err(|_| Error::format(format!("truncated block `{name}`: dims")))?
                    as usize;
                dims.push(d);
                count = count.saturating_mul(d);
            }
            let mut values = vec![0f32; count];
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(format!("truncated block `{name}`: values")))?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                values[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            blocks.insert(name, Block { dims, values });
        }
        Ok(Container {
            magic,
            version,
            resolution,
            blocks,
        })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn round_trip_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.xswg");
        let mut c = Container::new(MAGIC_GENERATOR, 64);
        let a = ArrayD::<f32>::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.25, 0.0, 3.0, 4.5, -0.125])
            .unwrap();
        c.insert_array("syn.w", &a);
        c.insert_scalar("step", 7.0);
        c.write(&path).unwrap();

        let c2 = Container::read(&path, MAGIC_GENERATOR).unwrap();
        assert_eq!(c2.resolution, 64);
        assert_eq!(c2.get("syn.w").unwrap().values, c.get("syn.w").unwrap().values);

        // save(load(x)) is byte-identical
        let path2 = dir.path().join("y.xswg");
        c2.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_errors_not_crashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xswg");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            Container::read(&path, MAGIC_GENERATOR),
            Err(Error::Format(_))
        ));

        // right magic, truncated body
        let mut c = Container::new(MAGIC_GENERATOR, 64);
        c.insert_array(
            "w",
            &ArrayD::<f32>::zeros(IxDyn(&[8])),
        );
        c.write(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        assert!(matches!(
            Container::read(&path, MAGIC_GENERATOR),
            Err(Error::Format(_))
        ));

        // version mismatch
        let mut bytes = full.clone();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = Container::read(&path, MAGIC_GENERATOR).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
