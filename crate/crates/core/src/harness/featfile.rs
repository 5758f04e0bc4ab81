//! Binary slide feature files.
//!
//! Layout (little-endian): `b"MOADFEAT"`, `u32` version (1), `u32` rows,
//! `u32` cols, `u8` coordinate flag, `rows * cols` `f32` values row-major,
//! then `rows` `(i32 x, i32 y)` tile origins when the flag is 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::encoders::PatchBag;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"MOADFEAT";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(mut w: impl Write, embeddings: &Tensor, coords: Option<&[(i32, i32)]>) -> Result<()> {
    let (rows, cols) = match embeddings.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::shape(format!("feature matrix must be 2-D, got {s:?}"))),
    };
    if let Some(c) = coords {
        if c.len() != rows {
            return Err(Error::shape(format!("{} coordinates for {rows} rows", c.len())));
        }
    }
    let io = |e| Error::io("<feature stream>", e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(rows as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(cols as u32).map_err(io)?;
    w.write_u8(u8::from(coords.is_some())).map_err(io)?;
    for &v in embeddings.data() {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    if let Some(c) = coords {
        for &(x, y) in c {
            w.write_i32::<LittleEndian>(x).map_err(io)?;
            w.write_i32::<LittleEndian>(y).map_err(io)?;
        }
    }
    Ok(())
}

pub type Coords = Vec<(i32, i32)>;

pub fn read_features(mut r: impl Read) -> Result<(Tensor, Option<Coords>)> {
    let bad = |e: std::io::Error| Error::Data(format!("feature file truncated: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Data("not a slide feature file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let rows = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let flag = r.read_u8().map_err(bad)?;
    let mut raw = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(bad)?;
    let coords = match flag {
        0 => None,
        1 => {
            let mut c = Vec::with_capacity(rows);
            for _ in 0..rows {
                let x = r.read_i32::<LittleEndian>().map_err(bad)?;
                let y = r.read_i32::<LittleEndian>().map_err(bad)?;
                c.push((x, y));
            }
            Some(c)
        }
        other => return Err(Error::Data(format!("invalid coordinate flag {other}"))),
    };
    let data = raw.into_iter().map(f64::from).collect();
    Ok((Tensor::new(vec![rows, cols], data)?, coords))
}

pub fn save_bag(path: &Path, bag: &PatchBag) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_features(&mut w, &bag.embeddings, bag.coords.as_deref())?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_bag(path: &Path, slide_id: &str) -> Result<PatchBag> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (embeddings, coords) = read_features(BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    PatchBag::new(slide_id, embeddings, coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t, None).unwrap();
        assert_eq!(&buf[..8], b"MOADFEAT");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(buf[20], 0);
        assert_eq!(buf.len(), 21 + 6 * 4);
        assert_eq!(&buf[21..25], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t, Some(&[(3, 4)])).unwrap();
        assert!(read_features(&buf[..buf.len() - 1]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_features(wrong.as_slice()), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..6, cols in 1usize..5, seed in any::<u32>(), with_coords in any::<bool>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 37.0 - 10.0)
                .collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let coords: Option<Vec<(i32, i32)>> = with_coords.then(|| (0..rows as i32).map(|i| (i * 256, -i)).collect());
            let mut buf = Vec::new();
            write_features(&mut buf, &t, coords.as_deref()).unwrap();
            let (back, c) = read_features(buf.as_slice()).unwrap();
            let expect: Vec<f64> = t.data().iter().map(|v| *v as f32 as f64).collect();
            prop_assert_eq!(back.data(), expect.as_slice());
            prop_assert_eq!(c, coords);
        }
    }
}
