//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "MIMACKPT"
//! version  u32      1
//! arch     8 × u64  data_dim tokens embed_dim kv_dim value_dim hidden time_dim sites
//! steps    u64      schedule length the model was built for
//! kv       u64 count, then per matrix: u64 rows, u64 cols, rows·cols × f64
//! rest     u64 length, then length × f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::model::Denoiser;
use super::net::Arch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::ParamSet;

const MAGIC: &[u8; 8] = b"MIMACKPT";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn get_usize(r: &mut impl Read, limit: usize) -> Result<usize> {
    let v = get_u64(r)?;
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= limit)
        .ok_or_else(|| Error::Checkpoint(format!("implausible size field {v}")))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(io_err)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write_checkpoint(model: &Denoiser, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let a = model.arch();
    for v in [
        a.data_dim,
        a.tokens,
        a.embed_dim,
        a.kv_dim,
        a.value_dim,
        a.hidden,
        a.time_dim,
        a.sites,
        model.num_steps(),
    ] {
        put_u64(w, v as u64)?;
    }
    let p = model.params();
    put_u64(w, p.kv_weights.len() as u64)?;
    for m in &p.kv_weights {
        put_u64(w, m.rows() as u64)?;
        put_u64(w, m.cols() as u64)?;
        put_f64s(w, m.as_slice())?;
    }
    put_u64(w, p.rest.len() as u64)?;
    put_f64s(w, &p.rest)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Denoiser> {
    const LIMIT: usize = 1 << 28;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb).map_err(io_err)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = get_usize(r, LIMIT)?;
    }
    let arch = Arch {
        data_dim: f[0],
        tokens: f[1],
        embed_dim: f[2],
        kv_dim: f[3],
        value_dim: f[4],
        hidden: f[5],
        time_dim: f[6],
        sites: f[7],
    };
    let kv_count = get_usize(r, LIMIT)?;
    let mut kv = Vec::with_capacity(kv_count);
    for _ in 0..kv_count {
        let rows = get_usize(r, LIMIT)?;
        let cols = get_usize(r, LIMIT)?;
        kv.push(Matrix::new(rows, cols, get_f64s(r, rows * cols)?)?);
    }
    let rest_len = get_usize(r, LIMIT)?;
    let rest = get_f64s(r, rest_len)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Denoiser::new(arch, f[8], ParamSet::new(kv, rest))
}

pub fn save(model: &Denoiser, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Denoiser> {
    let bytes = std::fs::read(path).map_err(io_err)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Arch { sites: 2, ..Arch::default() };
        let model = Denoiser::init(arch, 50, &mut Rng::new(8)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        let bits = |m: &Denoiser| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(model, back);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let model = Denoiser::init(Arch::default(), 10, &mut Rng::new(0)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());
    }
}
