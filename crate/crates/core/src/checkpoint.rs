//! Binary training checkpoints.
//!
//! ```text
//! "OSVC" u32 version
//! u64 len, config text
//! u64 step
//! two stores (generator, discriminator):
//!     u64 count, then per parameter: u64 len, name, OSVT tensor
//! two optimiser states in the same order:
//!     u64 adam step, then per parameter: OSVT first moment, OSVT second moment
//! ```
//!
//! All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};
use crate::train::Trainer;

const MAGIC: &[u8; 4] = b"OSVC";
const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    write_tensor_to(out, t).expect("writing to memory");
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes<'a>(r: &mut &'a [u8]) -> Result<&'a [u8]> {
    let n = get_u64(r)? as usize;
    if r.len() < n {
        return Err(bad("truncated"));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore<f32>) {
    put_u64(out, store.len() as u64);
    for (name, t) in store.names().iter().zip(store.tensors()) {
        put_bytes(out, name.as_bytes());
        put_tensor(out, t);
    }
}

fn put_adam(out: &mut Vec<u8>, adam: &AdamState<f32>) {
    put_u64(out, adam.step);
    for (m, v) in adam.first.iter().zip(&adam.second) {
        put_tensor(out, m);
        put_tensor(out, v);
    }
}

/// Overwrites `store` with the stored tensors, which must match by name
/// and shape in the same order.
fn get_store(r: &mut &[u8], store: &mut ParamStore<f32>, what: &str) -> Result<()> {
    let n = get_u64(r)? as usize;
    if n != store.len() {
        return Err(bad(format!("{what}: {n} tensors stored, model has {}", store.len())));
    }
    for i in 0..n {
        let name = std::str::from_utf8(get_bytes(r)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let t: Tensor<f32> = read_tensor_from(r)?;
        let expect = &store.names()[i];
        if name != expect || t.shape() != store.tensors()[i].shape() {
            return Err(bad(format!("{what}: stored `{name}` {:?} does not match `{expect}`", t.shape())));
        }
        store.tensors_mut()[i] = t;
    }
    Ok(())
}

fn get_adam(r: &mut &[u8], adam: &mut AdamState<f32>) -> Result<()> {
    adam.step = get_u64(r)?;
    for (m, v) in adam.first.iter_mut().zip(adam.second.iter_mut()) {
        let (m2, v2): (Tensor<f32>, Tensor<f32>) = (read_tensor_from(r)?, read_tensor_from(r)?);
        if m2.shape() != m.shape() || v2.shape() != v.shape() {
            return Err(bad("optimiser moment shape mismatch"));
        }
        *m = m2;
        *v = v2;
    }
    Ok(())
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, t.config.to_text().as_bytes());
    put_u64(&mut out, t.step);
    put_store(&mut out, &t.gen_params);
    put_store(&mut out, &t.disc_params);
    put_adam(&mut out, &t.gen_adam);
    put_adam(&mut out, &t.disc_adam);
    out
}

/// Rebuilds a trainer from its stored configuration and state.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = bytes;
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|_| bad("truncated"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let text = std::str::from_utf8(get_bytes(&mut r)?).map_err(|_| bad("config is not UTF-8"))?;
    let config = TrainConfig::from_text(text)?;
    let mut t = Trainer::new(config)?;
    t.step = get_u64(&mut r)?;
    get_store(&mut r, &mut t.gen_params, "generator")?;
    get_store(&mut r, &mut t.disc_params, "discriminator")?;
    get_adam(&mut r, &mut t.gen_adam)?;
    get_adam(&mut r, &mut t.disc_adam)?;
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.len())));
    }
    Ok(t)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&to_bytes(t)).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model.completion.blocks = 1;
        c.model.completion.heads = 2;
        c.seed = 3;
        c
    }

    #[test]
    fn round_trip_restores_everything() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.step = 17;
        t.gen_adam.step = 17;
        t.gen_params.tensors_mut()[0].data_mut()[0] = 0.125;
        t.disc_adam.first[1].data_mut()[0] = -2.5;
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, t.config);
        assert_eq!(back.step, 17);
        assert_eq!(back.gen_params.tensors(), t.gen_params.tensors());
        assert_eq!(back.disc_params.tensors(), t.disc_params.tensors());
        assert_eq!(back.gen_adam, t.gen_adam);
        assert_eq!(back.disc_adam, t.disc_adam);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&Trainer::new(tiny()).unwrap());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }
}
