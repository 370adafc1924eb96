//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!   magic "FFCK" | version u32 | param count u32
//!   then per parameter, sorted by name:
//!   name length u32 | name utf-8 | rank u32 | extent u32 × rank | values f32 LE
//!
//! Values are stored as f32 regardless of the runtime precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::{numel, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"FFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"FFCK\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    ParamMismatch(String),
}

pub fn write_to<T: Element, W: Write>(
    store: &ParamStore<T>,
    mut w: W,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len())
        .map_err(|_| CheckpointError::Malformed("too many params".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in store.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(store, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("param name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n = numel(&shape);
        if n > 1 << 28 {
            return Err(CheckpointError::Malformed(format!("{name} has {n} values")));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        out.push((
            name,
            Tensor::from_vec(&shape, data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
        ));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after last param".into()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    read_from(BufReader::new(File::open(path)?))
}

/// Loads a checkpoint into an already-registered store. The file must hold
/// exactly the registered parameters with matching shapes.
pub fn load_into<T: Element>(
    store: &mut ParamStore<T>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let entries = read(path)?;
    if entries.len() != store.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "file has {} params, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let expected = store
            .get(&name)
            .map_err(|_| CheckpointError::ParamMismatch(format!("unexpected param {name}")))?
            .shape()
            .to_vec();
        if expected != t.shape() {
            return Err(CheckpointError::ParamMismatch(format!(
                "{name}: file shape {:?}, model shape {expected:?}",
                t.shape()
            )));
        }
        store
            .set(&name, t.cast::<T>())
            .map_err(|e| CheckpointError::ParamMismatch(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::param::Init;

    #[test]
    fn golden_bytes_for_a_single_param() {
        let mut s = ParamStore::<f32>::new(0);
        s.register("w", &[2, 2], Init::Zeros).unwrap();
        s.set("w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_to(&s, &mut bytes).unwrap();
        let mut expected = Vec::new();
        expected.extend(b"FFCK");
        expected.extend(1u32.to_le_bytes()); // version
        expected.extend(1u32.to_le_bytes()); // count
        expected.extend(1u32.to_le_bytes()); // name length
        expected.extend(b"w");
        expected.extend(2u32.to_le_bytes()); // rank
        expected.extend(2u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let mut s = ParamStore::<f32>::new(42);
        s.register("enc.w", &[3, 3, 2, 4], Init::KaimingUniform { fan_in: 18 }).unwrap();
        s.register("enc.b", &[4], Init::Normal { std: 0.02 }).unwrap();
        s.register("head.w", &[7], Init::Ones).unwrap();
        let mut bytes = Vec::new();
        write_to(&s, &mut bytes).unwrap();
        let entries = read_from(&bytes[..]).unwrap();
        assert_eq!(entries.len(), 3);
        // sorted by name
        assert_eq!(entries[0].0, "enc.b");
        assert_eq!(entries[1].0, "enc.w");
        assert_eq!(entries[2].0, "head.w");
        for (name, t) in entries {
            let orig = s.get(&name).unwrap();
            assert_eq!(orig.shape(), t.shape());
            assert_eq!(orig.data(), t.data());
        }
    }

    #[test]
    fn f32_payload_is_bitwise_stable_through_f64_store() {
        let tricky = [0.1f32, 1.0 / 3.0, f32::MIN_POSITIVE, 1e30, -0.0];
        let mut s = ParamStore::<f64>::new(0);
        s.register("w", &[5], Init::Zeros).unwrap();
        s.set(
            "w",
            Tensor::from_vec(&[5], tricky.iter().map(|&v| v as f64).collect()).unwrap(),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_to(&s, &mut bytes).unwrap();
        let entries = read_from(&bytes[..]).unwrap();
        for (a, b) in entries[0].1.data().iter().zip(tricky.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(read_from(&bytes[..]), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.register("w", &[4], Init::Ones).unwrap();
        let mut bytes = Vec::new();
        write_to(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_from(&bytes[..]), Err(CheckpointError::Io(_))));
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffck");
        let mut src = ParamStore::<f32>::new(1);
        src.register("w", &[2, 3], Init::Normal { std: 1.0 }).unwrap();
        save(&src, &path).unwrap();

        let mut ok = ParamStore::<f32>::new(99);
        ok.register("w", &[2, 3], Init::Zeros).unwrap();
        load_into(&mut ok, &path).unwrap();
        assert_eq!(ok.get("w").unwrap().data(), src.get("w").unwrap().data());

        let mut wrong_shape = ParamStore::<f32>::new(0);
        wrong_shape.register("w", &[3, 2], Init::Zeros).unwrap();
        assert!(matches!(
            load_into(&mut wrong_shape, &path),
            Err(CheckpointError::ParamMismatch(_))
        ));

        let mut wrong_name = ParamStore::<f32>::new(0);
        wrong_name.register("v", &[2, 3], Init::Zeros).unwrap();
        assert!(matches!(
            load_into(&mut wrong_name, &path),
            Err(CheckpointError::ParamMismatch(_))
        ));
    }
}
