//! Versioned binary checkpoint format for named tensors.
//!
//! Layout: magic `MSAS`, format version u32, parameter count u32, then per
//! parameter: name length u16 + UTF-8 name, rank u8, dims as u32s, payload
//! as little-endian f64. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSAS";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| TensorError::InvalidArg {
        op: "save_checkpoint",
        detail: "too many parameters".into(),
    })?;
    out.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| TensorError::InvalidArg {
            op: "save_checkpoint",
            detail: format!("parameter name too long: {name:?}"),
        })?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.shape().len()).map_err(|_| TensorError::InvalidArg {
            op: "save_checkpoint",
            detail: "rank exceeds u8".into(),
        })?;
        out.write_all(&[rank])?;
        for &dim in tensor.shape() {
            let dim = u32::try_from(dim).map_err(|_| TensorError::InvalidArg {
                op: "save_checkpoint",
                detail: "dimension exceeds u32".into(),
            })?;
            out.write_all(&dim.to_le_bytes())?;
        }
        for &value in tensor.data() {
            out.write_all(&value.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut input)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| TensorError::Format(format!("non-UTF-8 name: {e}")))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
