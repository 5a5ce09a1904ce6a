//! VLAD aggregation and normalization.

use std::path::Path;

use crate::codebook::{assign_nn, Codebook};
use crate::error::{Error, Result};
use crate::format::{checked_count, ByteReader, ByteWriter, DESCRIPTOR_MAGIC, FORMAT_VERSION};

/// The local descriptors extracted from one image. May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    pub image_id: String,
    dim: usize,
    descriptors: Vec<Vec<f32>>,
}

impl LocalDescriptorSet {
    pub fn new(
        image_id: impl Into<String>,
        dim: usize,
        descriptors: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "descriptor dimension must be positive".into(),
            ));
        }
        for x in &descriptors {
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: x.len(),
                });
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            dim,
            descriptors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptors(&self) -> &[Vec<f32>] {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Serializes descriptor sets in the `PDSC` layout.
pub fn descriptors_to_bytes(dim: usize, sets: &[LocalDescriptorSet]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(DESCRIPTOR_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(dim as u32);
    w.u64(sets.len() as u64);
    for set in sets {
        if set.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: set.dim,
            });
        }
        w.string(&set.image_id)?;
        w.u32(set.descriptors.len() as u32);
        for x in &set.descriptors {
            for &v in x {
                w.f32(v);
            }
        }
    }
    Ok(w.into_inner())
}

pub fn descriptors_from_bytes(bytes: &[u8]) -> Result<(usize, Vec<LocalDescriptorSet>)> {
    let mut r = ByteReader::new("descriptor file", bytes);
    r.header(DESCRIPTOR_MAGIC)?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(r.err("descriptor dimension is zero"));
    }
    let count = r.u64()?;
    let count = checked_count(&r, count, 8)?;
    let mut sets = Vec::with_capacity(count);
    for _ in 0..count {
        let image_id = r.string()?;
        let n = r.u32()? as usize;
        let total = checked_count(&r, (n as u64) * (dim as u64), 4)?;
        let flat = r.f32s(total)?;
        let descriptors = flat.chunks_exact(dim).map(<[f32]>::to_vec).collect();
        sets.push(LocalDescriptorSet::new(image_id, dim, descriptors)?);
    }
    r.finish()?;
    Ok((dim, sets))
}

pub fn write_descriptor_file(
    path: impl AsRef<Path>,
    dim: usize,
    sets: &[LocalDescriptorSet],
) -> Result<u64> {
    let bytes = descriptors_to_bytes(dim, sets)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_descriptor_file(path: impl AsRef<Path>) -> Result<(usize, Vec<LocalDescriptorSet>)> {
    descriptors_from_bytes(&std::fs::read(path)?)
}

/// K concatenated d-dimensional blocks.
///
/// `zero_flags[i]` marks a block that received no descriptor; such a block is
/// all zeros. A block can also be all zeros without being flagged (its
/// residuals cancelled), and [`VladVector::is_zero_block`] reports both cases.
#[derive(Debug, Clone, PartialEq)]
pub struct VladVector {
    pub image_id: String,
    num_blocks: usize,
    block_dim: usize,
    values: Vec<f64>,
    zero_flags: Vec<bool>,
}

impl VladVector {
    /// Builds a vector from raw values, flagging every all-zero block.
    pub fn from_values(
        image_id: impl Into<String>,
        num_blocks: usize,
        block_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if num_blocks == 0 || block_dim == 0 {
            return Err(Error::InvalidParameter("K and d must be positive".into()));
        }
        if values.len() != num_blocks * block_dim {
            return Err(Error::DimensionMismatch {
                expected: num_blocks * block_dim,
                actual: values.len(),
            });
        }
        let zero_flags = values
            .chunks_exact(block_dim)
            .map(|b| b.iter().all(|&v| v == 0.0))
            .collect();
        Ok(Self {
            image_id: image_id.into(),
            num_blocks,
            block_dim,
            values,
            zero_flags,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Full dimension K·d.
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.values[j * self.block_dim..(j + 1) * self.block_dim]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.block_dim)
    }

    pub fn zero_flags(&self) -> &[bool] {
        &self.zero_flags
    }

    pub fn is_zero_block(&self, j: usize) -> bool {
        self.zero_flags[j] || self.block(j).iter().all(|&v| v == 0.0)
    }

    /// True when every component is zero; such a vector has no terms.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rounds every component to f32 precision, the precision used on disk.
    pub fn to_f32_precision(&self) -> Self {
        let values = self.values.iter().map(|&v| f64::from(v as f32)).collect();
        let mut out = Self::from_values(
            self.image_id.clone(),
            self.num_blocks,
            self.block_dim,
            values,
        )
        .expect("shape is unchanged");
        for (flag, &orig) in out.zero_flags.iter_mut().zip(&self.zero_flags) {
            *flag |= orig;
        }
        out
    }
}

/// Sums the residuals `x - mu_i` of each descriptor into the block of its
/// nearest codeword, in descriptor order.
pub fn aggregate(image: &LocalDescriptorSet, codebook: &Codebook) -> Result<VladVector> {
    if image.dim != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            actual: image.dim,
        });
    }
    let k = codebook.len();
    let d = codebook.dim();
    let mut values = vec![0.0f64; k * d];
    let mut zero_flags = vec![true; k];
    for x in &image.descriptors {
        let i = assign_nn(x, codebook)?;
        zero_flags[i] = false;
        let block = &mut values[i * d..(i + 1) * d];
        for ((acc, &xv), &mu) in block.iter_mut().zip(x).zip(codebook.centroid(i)) {
            *acc += f64::from(xv) - f64::from(mu);
        }
    }
    Ok(VladVector {
        image_id: image.image_id.clone(),
        num_blocks: k,
        block_dim: d,
        values,
        zero_flags,
    })
}

/// Signed square-root power normalization followed by global L2
/// normalization. An all-zero vector comes back unchanged.
pub fn normalize(v: &VladVector) -> VladVector {
    let mut out = v.clone();
    for c in &mut out.values {
        *c = c.signum() * c.abs().sqrt();
    }
    let norm = out.norm();
    if norm > 0.0 {
        for c in &mut out.values {
            *c /= norm;
        }
    } else {
        // collapse -0.0 so the result is bit-identical to the input zeros
        out.values.clone_from(&v.values);
    }
    out
}

pub fn inner_product(a: &VladVector, b: &VladVector) -> Result<f64> {
    if a.num_blocks != b.num_blocks || a.block_dim != b.block_dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
