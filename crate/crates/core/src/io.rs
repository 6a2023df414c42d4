//! Binary model files: a magic string, a version byte, a tensor count and
//! then one record per tensor (name, rank, extents, little-endian `f64`
//! data). All integers are little-endian `u64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{CoAttModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MFBMODEL";
pub const VERSION: u8 = 1;

fn put_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| Error::Input("length field overflows usize".into()))
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    put_u64(w, tensors.len())?;
    for (name, t) in tensors {
        put_u64(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.rank())?;
        for &e in t.shape() {
            put_u64(w, e)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a whole tensor file. Sizes are validated before any allocation
/// that depends on them.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input("not a model file (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Input(format!(
            "unsupported model file version {}",
            version[0]
        )));
    }
    let count = get_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = get_u64(r)?;
        if len > 4096 {
            return Err(Error::Input(format!("tensor name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Input("tensor name is not UTF-8".into()))?;
        let rank = get_u64(r)?;
        if rank == 0 || rank > 8 {
            return Err(Error::Input(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(r)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Input(format!("tensor {name} extents overflow")))?;
        let mut bytes = vec![
            0u8;
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Input("tensor too large".into()))?
        ];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_model(path: &Path, model: &CoAttModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, &model.named_params())?;
    w.flush()?;
    Ok(())
}

/// Rebuilds a model for `config` and fills it from the file at `path`.
pub fn load_model(path: &Path, config: ModelConfig) -> Result<CoAttModel> {
    let named = read_tensors(&mut BufReader::new(File::open(path)?))?;
    let mut model = CoAttModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_named(&named)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_and_version() {
        let mut buf = b"NOTMODEL\x01".to_vec();
        buf.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(Error::Input(_))
        ));
        let mut buf = MAGIC.to_vec();
        buf.push(9);
        buf.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), &t)]).unwrap();
        buf.pop();
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn layout_is_documented_byte_order() {
        let t = Tensor::vector(vec![1.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), &t)]).unwrap();
        let mut expect = MAGIC.to_vec();
        expect.push(VERSION);
        for v in [1u64, 1, 1, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        // name bytes go right after the name length
        expect.insert(9 + 16, b'w');
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(buf, expect);
    }
}
