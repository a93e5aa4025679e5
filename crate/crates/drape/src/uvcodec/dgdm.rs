//! DGDM binary container for texel grids.
//!
//! Layout: magic `DGDM`, u16 version (=1), u32 rows, u32 cols, u32 channels,
//! then rows·cols·channels little-endian f32 values, row-major and
//! channel-interleaved. Displacement maps use 3 channels, latents 4.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DGDM";
pub const VERSION: u16 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes a grid to a DGDM file. Values are stored as f32.
pub fn write_grid(grid: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols, channels) = grid.dim();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(rows as u32)?;
        w.write_u32::<LittleEndian>(cols as u32)?;
        w.write_u32::<LittleEndian>(channels as u32)?;
        for i in 0..rows {
            for j in 0..cols {
                for c in 0..channels {
                    w.write_f32::<LittleEndian>(grid[(i, j, c)] as f32)?;
                }
            }
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

/// Reads a DGDM file back into an f64 grid.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected DGDM",
            path.display(),
            magic
        )));
    }
    let version = r.read_u16::<LittleEndian>().map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported DGDM version {version}",
            path.display()
        )));
    }
    let rows = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let channels = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let count = rows
        .checked_mul(cols)
        .and_then(|x| x.checked_mul(channels))
        .filter(|&x| x <= (1 << 30))
        .ok_or_else(|| Error::Format(format!("{}: implausible DGDM dimensions", path.display())))?;

    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))? as f64);
    }
    Array3::from_shape_vec((rows, cols, channels), values)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.dgdm");
        std::fs::write(&p, b"NOPE\x01\x00").unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_is_lossless_for_f32_values(
            rows in 1usize..6,
            cols in 1usize..6,
            channels in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = Array3::from_shape_fn((rows, cols, channels), |_| {
                // f32-representable values survive the roundtrip exactly.
                rng.random_range(-10.0f32..10.0) as f64
            });
            let dir = tempdir().unwrap();
            let p = dir.path().join("grid.dgdm");
            write_grid(&grid, &p).unwrap();
            let back = read_grid(&p).unwrap();
            prop_assert_eq!(grid, back);
            // Write → read → write produces identical bytes.
            let p2 = dir.path().join("grid2.dgdm");
            write_grid(&read_grid(&p).unwrap(), &p2).unwrap();
            prop_assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        }
    }
}
