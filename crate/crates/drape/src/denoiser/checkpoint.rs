//! Versioned binary checkpoint container with named tensors.
//!
//! Layout: magic `DGCK`, u16 version (=1), u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 dims, and the
//! row-major payload as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

use super::nn::{Params, Tensor};

pub const MAGIC: &[u8; 4] = b"DGCK";
pub const VERSION: u16 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_params(params: &Params, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(params.len() as u32)?;
        for (name, tensor) in params.entries() {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(tensor.dims.len() as u8)?;
            for &d in &tensor.dims {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &tensor.data {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Params> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected DGCK",
            path.display(),
            magic
        )));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    if count > 4096 {
        return Err(Error::Format(format!(
            "{}: implausible tensor count {count}",
            path.display()
        )));
    }

    let mut params = Params::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("{}: tensor name: {e}", path.display())))?;
        let rank = r.read_u8().map_err(|e| io_err(path, e))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > (1 << 28) {
            return Err(Error::Format(format!(
                "{}: implausible tensor size {numel}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))? as f64);
        }
        if params.contains(&name) {
            return Err(Error::Format(format!(
                "{}: duplicate tensor {name}",
                path.display()
            )));
        }
        params.add(&name, Tensor { dims, data });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_layout_and_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        for (name, dims) in [
            ("conv1.weight", vec![4usize, 2, 3, 3]),
            ("conv1.bias", vec![4]),
            ("film.weight", vec![8, 12]),
        ] {
            let mut t = Tensor::zeros(&dims);
            for v in &mut t.data {
                // f32-representable so the roundtrip is exact.
                *v = rng.random_range(-1.0f32..1.0) as f64;
            }
            params.add(name, t);
        }

        let dir = tempdir().unwrap();
        let p = dir.path().join("model.dgck");
        save_params(&params, &p).unwrap();
        let loaded = load_params(&p).unwrap();
        loaded.check_layout(&params).unwrap();
        for ((_, a), (_, b)) in params.entries().zip(loaded.entries()) {
            assert_eq!(a.data, b.data);
        }

        // save(load(x)) is byte-identical to x.
        let p2 = dir.path().join("model2.dgck");
        save_params(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.dgck");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_params(&p), Err(Error::Format(_))));
    }
}
