//! Binary checkpoint format.
//!
//! ```text
//! "RSAN"                      4 bytes magic
//! version                     u8 (= 1)
//! config                      u32 length + UTF-8 JSON of NetworkConfig
//! entry count                 u32
//! per entry:
//!   name                      u32 length + UTF-8
//!   rank                      u8
//!   dims                      u32 x rank
//!   data                      f32 x product(dims)
//! ```
//!
//! All integers and floats are little-endian. Batch-norm running
//! statistics are ordinary entries whose names end in `.running_mean` or
//! `.running_var`.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RSAN";
pub const VERSION: u8 = 1;

pub fn write_to<W: Write>(net: &Network<f32>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let config = serde_json::to_vec(net.config())?;
    write_u32(&mut w, config.len())?;
    w.write_all(&config)?;
    write_u32(&mut w, net.params().len())?;
    for p in net.params().iter() {
        write_u32(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Format("tensor rank exceeds 255".into()))?;
        w.write_all(&[rank])?;
        for &d in p.value.shape() {
            write_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(net, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn save(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<Network<f32>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u8(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let config_len = read_u32(&mut r)?;
    let mut config = vec![0u8; config_len];
    read_exact(&mut r, &mut config)?;
    let config: NetworkConfig =
        serde_json::from_slice(&config).map_err(|e| Error::Format(format!("bad config json: {e}")))?;

    let mut net = Network::<f32>::build(config, 0)?;
    let count = read_u32(&mut r)?;
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u8(&mut r)? as usize;
        let dims = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format(format!("{name}: dims overflow")))?;
        let mut raw = vec![0u8; len * 4];
        read_exact(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let id = net
            .params()
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let slot = &mut net.params_mut().get_mut(id).value;
        if slot.shape() != dims.as_slice() {
            return Err(Error::Format(format!(
                "{name}: stored shape {dims:?} does not match {:?}",
                slot.shape()
            )));
        }
        let trainable = slot.requires_grad();
        *slot = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?
            .with_requires_grad(trainable);
        seen.insert(name);
    }
    if let Some(missing) = net.params().iter().find(|p| !seen.contains(&p.name)) {
        return Err(Error::Format(format!("missing parameter {}", missing.name)));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(net)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    read_from(bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}
