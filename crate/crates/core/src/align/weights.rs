//! `SMAW1` weights files: the magic bytes followed by one record per tensor
//! (`u32` name length, UTF-8 name, `u32` rank, `u32` dims, row-major `f32`
//! data), all little-endian.

use std::io::{Read, Write};

use super::tensor::Matrix;
use super::AlignError;

const MAGIC: &[u8; 5] = b"SMAW1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    /// Views a rank-1 or rank-2 tensor as a matrix (rank 1 becomes one row).
    pub fn to_matrix(&self) -> Result<Matrix, AlignError> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(AlignError::Weights(format!(
                    "{}: rank {} is not a matrix",
                    self.name,
                    other.len()
                )))
            }
        };
        Ok(Matrix::from_vec(
            r,
            c,
            self.data.iter().map(|&v| v as f64).collect(),
        ))
    }
}

pub fn write_weights<'a>(
    mut w: impl Write,
    tensors: impl IntoIterator<Item = (String, &'a Matrix)>,
) -> Result<(), AlignError> {
    w.write_all(MAGIC)?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 4);
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_weights(mut r: impl Read) -> Result<Vec<NamedTensor>, AlignError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(AlignError::Weights("missing SMAW1 magic".into()));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], AlignError> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AlignError::Weights(format!("truncated record at byte {pos}")))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<usize, AlignError> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    while pos < bytes.len() {
        let name_len = u32_at(&mut pos)?;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| AlignError::Weights("tensor name is not UTF-8".into()))?;
        let rank = u32_at(&mut pos)?;
        let dims = (0..rank)
            .map(|_| u32_at(&mut pos))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4).map(|_| c))
            .ok_or_else(|| AlignError::Weights(format!("{name}: dimensions overflow")))?;
        let raw = take(&mut pos, count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}
