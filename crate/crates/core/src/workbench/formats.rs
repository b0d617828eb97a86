//! `CRDT` tensor files and PGM sample grids.

use std::path::Path;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"CRDT";
const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = ByteWriter::new(TENSOR_MAGIC, TENSOR_VERSION);
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f64s(t.data());
    w.finish()
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::open(bytes, TENSOR_MAGIC, TENSOR_VERSION)?;
    let at = r.offset();
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(Error::format(at, "rank-0 tensors are not allowed"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::format(at, "zero-length dimension"));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, "shape overflows"))?;
        shape.push(d);
    }
    let data = r.f64s(len)?;
    r.expect_end()?;
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = ByteWriter::raw();
    w.bytes(&encode_tensor(t));
    w.write_to(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?)
}

/// Writes a sample set as one tensor with a leading sample axis.
pub fn write_samples(path: &Path, samples: &[Tensor]) -> Result<()> {
    write_tensor(path, &Tensor::stack(samples)?)
}

pub fn read_samples(path: &Path) -> Result<Vec<Tensor>> {
    let t = read_tensor(path)?;
    if t.rank() < 2 {
        return Err(Error::format(8, "sample files need a leading sample axis"));
    }
    Ok(t.rows())
}

/// Pixel layout of a montage: `(height, width)` in pixels.
pub fn grid_dims(n: usize, columns: usize, h: usize, w: usize) -> (usize, usize) {
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    (rows * h + rows - 1, cols * w + cols - 1)
}

/// Writes images as a binary PGM montage with one-pixel separators. Values
/// are clamped to `[0, 1]`; returns the number of clamped pixels and, when
/// non-zero, records it in a `.note` sidecar next to the image.
pub fn write_grid(path: &Path, images: &[Tensor], columns: usize) -> Result<usize> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("grid needs at least one image"))?;
    if columns == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (h, w) = match first.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape(format!("grid images must be rank 2, got {s:?}"))),
    };
    if let Some(i) = images.iter().position(|x| x.shape() != first.shape()) {
        return Err(Error::shape(format!("image {i} differs in shape")));
    }
    let cols = columns.min(images.len());
    let (gh, gw) = grid_dims(images.len(), columns, h, w);
    // separators are mid-gray
    let mut px = vec![128u8; gh * gw];
    let mut clamped = 0;
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                let v = img.data()[i * w + j];
                if !(0.0..=1.0).contains(&v) {
                    clamped += 1;
                }
                px[(oy + i) * gw + ox + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    // unused cells in a ragged last row stay black
    for k in images.len()..cols * images.len().div_ceil(cols) {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for i in 0..h {
            px[(oy + i) * gw + ox..(oy + i) * gw + ox + w].fill(0);
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    let mut writer = ByteWriter::raw();
    writer.bytes(&out);
    writer.write_to(path)?;
    let note = path.with_extension("note");
    if clamped > 0 {
        std::fs::write(
            &note,
            format!("{clamped} pixel values fell outside [0, 1] and were clamped\n"),
        )
        .map_err(|e| Error::io(&note, e))?;
    } else if note.exists() {
        std::fs::remove_file(&note).map_err(|e| Error::io(&note, e))?;
    }
    Ok(clamped)
}
