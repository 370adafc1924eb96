//! Middlebury `.flo` flow files: little-endian f32 magic 202021.25,
//! i32 width, i32 height, then row-major interleaved (dx, dy) f32 pairs.
//! Validity masks are not part of the format; reads mark all pixels valid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, FlowField};

pub const MAGIC: f32 = 202021.25;

pub fn write_to<W: Write>(field: &FlowField, mut w: W) -> Result<(), DataError> {
    w.write_all(&MAGIC.to_le_bytes())?;
    w.write_all(&(field.w as i32).to_le_bytes())?;
    w.write_all(&(field.h as i32).to_le_bytes())?;
    for &v in &field.flow {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write(field: &FlowField, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<FlowField, DataError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let magic = f32::from_le_bytes(b4);
    if magic.to_bits() != MAGIC.to_bits() {
        return Err(DataError::Format(format!("bad flo magic {magic}")));
    }
    r.read_exact(&mut b4)?;
    let w = i32::from_le_bytes(b4);
    r.read_exact(&mut b4)?;
    let h = i32::from_le_bytes(b4);
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > 1 << 28 {
        return Err(DataError::Format(format!("bad flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut flow = Vec::with_capacity(h * w * 2);
    for _ in 0..h * w * 2 {
        r.read_exact(&mut b4)?;
        flow.push(f32::from_le_bytes(b4));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DataError::Format("trailing bytes after flow data".into()));
    }
    Ok(FlowField { h, w, flow, valid: vec![true; h * w] })
}

pub fn read(path: &Path) -> Result<FlowField, DataError> {
    read_from(BufReader::new(File::open(path)?))
}
