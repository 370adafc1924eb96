//! Binary PPM (P6) images with 8-bit channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Image};

pub fn encode_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend(img.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write(img: &Image, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_bytes(img))?;
    w.flush()?;
    Ok(())
}

/// Reads one whitespace-delimited token, skipping `#` comments.
fn token<R: Read>(r: &mut R) -> Result<String, DataError> {
    let mut byte = [0u8; 1];
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(DataError::Format("unexpected end of ppm header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_from<R: Read>(mut r: R) -> Result<Image, DataError> {
    let magic = token(&mut r)?;
    if magic != "P6" {
        return Err(DataError::Format(format!("not a P6 ppm (magic {magic})")));
    }
    let parse = |t: String| -> Result<usize, DataError> {
        t.parse::<usize>().map_err(|_| DataError::Format(format!("bad ppm header token {t}")))
    };
    let w = parse(token(&mut r)?)?;
    let h = parse(token(&mut r)?)?;
    let maxval = parse(token(&mut r)?)?;
    if maxval != 255 {
        return Err(DataError::Format(format!("unsupported ppm maxval {maxval}")));
    }
    if w == 0 || h == 0 || w * h > 1 << 26 {
        return Err(DataError::Format(format!("bad ppm dimensions {w}x{h}")));
    }
    // the single whitespace after maxval was already consumed by token()
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw)?;
    Ok(Image { h, w, rgb: raw.iter().map(|&b| b as f32 / 255.0).collect() })
}

pub fn read(path: &Path) -> Result<Image, DataError> {
    read_from(BufReader::new(File::open(path)?))
}
