//! The "LXCK" checkpoint blob: a header with a named shape table followed
//! by every tensor's values as little-endian 32-bit floats.
//!
//! ```text
//! magic "LXCK", version u16 = 1, reserved u16, tensor_count u32
//! per tensor: name_len u16, UTF-8 name, rows u32, cols u32
//! payload: tensors in table order, rows*cols LE f32 each
//! ```

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::ModelParams;

const MAGIC: &[u8; 4] = b"LXCK";
const VERSION: u16 = 1;

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let tensors = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
    }
    for (_, tensor) in &tensors {
        for v in tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(
                bytes.len(),
                format!("truncated while reading {what} (needed {n} bytes at offset {})", *pos),
            ));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected LXCK"));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    take(&mut pos, 2, "reserved")?;
    let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap());

    let mut shapes: Vec<(String, usize, usize)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name_offset = pos;
        let name = std::str::from_utf8(take(&mut pos, name_len, "tensor name")?)
            .map_err(|_| Error::format(name_offset, "tensor name is not UTF-8"))?
            .to_string();
        let rows = u32::from_le_bytes(take(&mut pos, 4, "rows")?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4, "cols")?.try_into().unwrap()) as usize;
        shapes.push((name, rows, cols));
    }

    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, rows, cols) in shapes {
        let raw = take(&mut pos, rows * cols * 4, "tensor payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::format(pos, "trailing bytes after tensor payload"));
    }
    ModelParams::from_named_tensors(tensors)
}
