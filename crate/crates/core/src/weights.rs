//! Binary weights file.
//!
//! ```text
//! "SPDR"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, rank × u32 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian. Architecture metadata is
//! stored as extra tensors under `*.meta.*` names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Conv2dParams, DenseParams, Parameters};
use crate::regressor::RegressorParams;
use crate::tensor::Tensor;
use crate::vae::VaeParams;

pub const MAGIC: [u8; 4] = *b"SPDR";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Format(format!("tensor `{name}` has rank {}", t.shape().len())))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} of `{name}` too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"SPDR\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn write_file(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(TensorMap(decode(&bytes)?.into_iter().collect()))
}

struct TensorMap(BTreeMap<String, Tensor>);

impl TensorMap {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    fn conv(&mut self, prefix: &str) -> Result<Conv2dParams> {
        let kernel = self.take(&format!("{prefix}.kernel"))?;
        let bias = self.take(&format!("{prefix}.bias"))?;
        if kernel.shape().len() != 4 || bias.shape() != [kernel.shape()[0]] {
            return Err(Error::Format(format!(
                "`{prefix}` has kernel {:?} and bias {:?}",
                kernel.shape(),
                bias.shape()
            )));
        }
        Ok(Conv2dParams { kernel, bias })
    }

    fn dense(&mut self, prefix: &str) -> Result<DenseParams> {
        let weight = self.take(&format!("{prefix}.weight"))?;
        let bias = self.take(&format!("{prefix}.bias"))?;
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Format(format!(
                "`{prefix}` has weight {:?} and bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(DenseParams { weight, bias })
    }

    fn count(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| self.0.contains_key(&format!("{prefix}{i}.kernel")))
            .count()
    }

    fn integers(&mut self, name: &str, n: usize) -> Result<Vec<usize>> {
        let t = self.take(name)?;
        let bad = || Error::Format(format!("metadata `{name}` malformed"));
        if t.len() != n {
            return Err(bad());
        }
        t.data()
            .iter()
            .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize).ok_or_else(bad))
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(extra) => Err(Error::Format(format!("unexpected tensor `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn hw_tensor(hw: (usize, usize)) -> Tensor {
    Tensor::vector(vec![hw.0 as f64, hw.1 as f64])
}

pub fn save_vae(path: &Path, params: &VaeParams) -> Result<()> {
    let meta = hw_tensor(params.image_hw);
    let mut tensors = params.named_tensors();
    tensors.push(("vae.meta.image_hw".into(), &meta));
    write_file(path, &tensors)
}

pub fn load_vae(path: &Path) -> Result<VaeParams> {
    let mut m = read_file(path)?;
    let hw = m.integers("vae.meta.image_hw", 2)?;
    let n = m.count("vae.enc");
    if n == 0 || m.count("vae.dec") != n {
        return Err(Error::Format("VAE encoder/decoder layer counts disagree".into()));
    }
    let encoder = (0..n).map(|i| m.conv(&format!("vae.enc{i}"))).collect::<Result<Vec<_>>>()?;
    let mu_head = m.dense("vae.mu")?;
    let logvar_head = m.dense("vae.logvar")?;
    let decoder_input = m.dense("vae.dec_in")?;
    let decoder = (0..n).map(|i| m.conv(&format!("vae.dec{i}"))).collect::<Result<Vec<_>>>()?;
    m.finish()?;
    let params = VaeParams {
        encoder,
        mu_head,
        logvar_head,
        decoder_input,
        decoder,
        image_hw: (hw[0], hw[1]),
    };
    check_vae(&params)?;
    Ok(params)
}

fn check_vae(p: &VaeParams) -> Result<()> {
    let expected = VaeParams::init(&p.config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let shapes = |q: &VaeParams| -> Vec<Vec<usize>> {
        q.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect()
    };
    if shapes(p) != shapes(&expected) {
        return Err(Error::Format("VAE tensor shapes are inconsistent".into()));
    }
    Ok(())
}

pub fn save_regressor(path: &Path, params: &RegressorParams) -> Result<()> {
    let hw = hw_tensor(params.image_hw);
    let target = Tensor::vector(vec![params.target_layer_index as f64]);
    let mut tensors = params.named_tensors();
    tensors.push(("reg.meta.image_hw".into(), &hw));
    tensors.push(("reg.meta.target_layer_index".into(), &target));
    write_file(path, &tensors)
}

pub fn load_regressor(path: &Path) -> Result<RegressorParams> {
    let mut m = read_file(path)?;
    let hw = m.integers("reg.meta.image_hw", 2)?;
    let target = m.integers("reg.meta.target_layer_index", 1)?[0];
    let n = m.count("reg.conv");
    let convs = (0..n).map(|i| m.conv(&format!("reg.conv{i}"))).collect::<Result<Vec<_>>>()?;
    let head = m.dense("reg.head")?;
    m.finish()?;
    let params = RegressorParams {
        convs,
        head,
        target_layer_index: target,
        image_hw: (hw[0], hw[1]),
    };
    let expected = RegressorParams::init(&params.config(), &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(e.to_string()))?;
    let shapes = |q: &RegressorParams| -> Vec<Vec<usize>> {
        q.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect()
    };
    if shapes(&params) != shapes(&expected) {
        return Err(Error::Format("regressor tensor shapes are inconsistent".into()));
    }
    Ok(params)
}
