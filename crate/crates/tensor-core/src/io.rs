//! Tensor serialization.
//!
//! Layout: magic `TNSR`, version u32, rank u32, dims u64[rank], then the
//! payload as little-endian f64 regardless of the build's element type
//! (f32 values embed exactly in f64, so round-trips stay bit-exact).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{Elem, Tensor};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f64).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt("magic"))?;
    if &magic != MAGIC {
        return Err(TensorError::Format {
            what: format!("bad magic {magic:?}"),
        });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorError::Format {
            what: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(TensorError::Format {
            what: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(corrupt("dims"))?;
        let d = u64::from_le_bytes(b);
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > (1 << 33) {
        return Err(TensorError::Format {
            what: format!("implausible element count {numel}"),
        });
    }
    let mut data = Vec::with_capacity(numel as usize);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut b).map_err(corrupt("payload"))?;
        data.push(f64::from_le_bytes(b) as Elem);
    }
    Tensor::new(&shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(corrupt("header"))?;
    Ok(u32::from_le_bytes(b))
}

fn corrupt(section: &'static str) -> impl Fn(std::io::Error) -> TensorError {
    move |e| TensorError::Format {
        what: format!("corrupt {section}: {e}"),
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
