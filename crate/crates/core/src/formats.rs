//! Binary noise and checkpoint files, plus policy text files.
//!
//! Noise (`ARMR`): magic, u8 version, u8 mode, u16 reserved, u32 count,
//! u32 C, u32 H, u32 W, f32 epsilon, then `count·C·H·W` f32 values.
//!
//! Checkpoint (`ARMD`): magic, u8 version, u32 stage count, u32 input
//! channels, one u32 width per stage, u32 non-local count, one u32 stage
//! index per block, u32 class count, then every parameter tensor as f32 in
//! declaration order. All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use armor_tensor::Tensor;

use crate::augment::AugPolicy;
use crate::model::{ArchDescriptor, Network, SurrogateModel};
use crate::noise::{DefensiveNoise, NoiseMode};
use crate::{ArmorError, Result};

pub const NOISE_MAGIC: &[u8; 4] = b"ARMR";
pub const NOISE_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARMD";
pub const CHECKPOINT_VERSION: u8 = 1;
const NOISE_HEADER: usize = 28;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ArmorError::Format(format!(
                "{} truncated at byte {}: need {n} more bytes, {} available",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ArmorError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(ArmorError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(ArmorError::Format(format!(
                "{} has {} trailing bytes after offset {}",
                self.what,
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ArmorError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_noise(noise: &DefensiveNoise) -> Result<Vec<u8>> {
    let s = noise.tensor().shape();
    let mut out = Vec::with_capacity(NOISE_HEADER + 4 * noise.tensor().len());
    out.extend_from_slice(NOISE_MAGIC);
    out.push(NOISE_VERSION);
    out.push(noise.mode().code());
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in s {
        put_u32(&mut out, d)?;
    }
    out.extend_from_slice(&noise.epsilon().to_le_bytes());
    put_f32s(&mut out, noise.tensor().data());
    Ok(out)
}

pub fn decode_noise(bytes: &[u8]) -> Result<DefensiveNoise> {
    let mut r = Reader::new(bytes, "noise file");
    r.magic(NOISE_MAGIC)?;
    let version = r.u8()?;
    if version != NOISE_VERSION {
        return Err(ArmorError::Format(format!("unsupported noise version {version}")));
    }
    let code = r.u8()?;
    let mode = NoiseMode::from_code(code).ok_or_else(|| ArmorError::Format(format!("unknown noise mode {code}")))?;
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(ArmorError::Format(format!("reserved field is {reserved}, expected 0")));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let epsilon = r.f32()?;
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = count
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(NOISE_HEADER))
        .ok_or_else(|| ArmorError::Format(format!("noise dimensions {dims:?} overflow")))?;
    if bytes.len() != expected {
        return Err(ArmorError::Format(format!(
            "noise payload length mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = r.f32s(count.expect("checked above"))?;
    r.finish()?;
    let tensor = Tensor::new(dims.to_vec(), data).map_err(|e| ArmorError::Format(e.to_string()))?;
    DefensiveNoise::new(mode, epsilon, tensor).map_err(|e| ArmorError::Format(e.to_string()))
}

pub fn encode_checkpoint(model: &SurrogateModel) -> Result<Vec<u8>> {
    let d = model.descriptor();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    put_u32(&mut out, d.widths.len())?;
    put_u32(&mut out, d.in_channels)?;
    for &w in &d.widths {
        put_u32(&mut out, w)?;
    }
    put_u32(&mut out, d.nonlocal_after.len())?;
    for &i in &d.nonlocal_after {
        put_u32(&mut out, i)?;
    }
    put_u32(&mut out, d.classes)?;
    for p in model.params() {
        put_f32s(&mut out, p.data());
    }
    Ok(out)
}

/// Upper bound on counts read from a checkpoint header before allocation.
const MAX_HEADER_COUNT: usize = 1 << 16;

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SurrogateModel> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(ArmorError::Format(format!("unsupported checkpoint version {version}")));
    }
    let bounded = |v: usize, what: &str| {
        if v > MAX_HEADER_COUNT {
            Err(ArmorError::Format(format!("implausible {what} {v}")))
        } else {
            Ok(v)
        }
    };
    let stages = bounded(r.u32()?, "stage count")?;
    let in_channels = bounded(r.u32()?, "input channel count")?;
    let widths = (0..stages)
        .map(|_| bounded(r.u32()?, "width"))
        .collect::<Result<Vec<_>>>()?;
    let blocks = bounded(r.u32()?, "non-local count")?;
    let nonlocal_after = (0..blocks).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let classes = bounded(r.u32()?, "class count")?;
    let descriptor = ArchDescriptor {
        in_channels,
        widths,
        nonlocal_after,
        classes,
    };
    descriptor.validate().map_err(|e| ArmorError::Format(e.to_string()))?;
    let shapes = descriptor.param_shapes();
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let remaining = bytes.len() - r.pos;
    if remaining != 4 * total {
        return Err(ArmorError::Format(format!(
            "checkpoint parameter block is {remaining} bytes, descriptor implies {}",
            4 * total
        )));
    }
    let mut params = Vec::with_capacity(shapes.len());
    for s in shapes {
        let n = s.iter().product();
        params.push(Tensor::new(s, r.f32s(n)?).map_err(|e| ArmorError::Format(e.to_string()))?);
    }
    r.finish()?;
    SurrogateModel::from_params(descriptor, params)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ArmorError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ArmorError::io(path, e))
}

pub fn write_noise(noise: &DefensiveNoise, path: &Path) -> Result<()> {
    write_bytes(path, &encode_noise(noise)?)
}

pub fn read_noise(path: &Path) -> Result<DefensiveNoise> {
    decode_noise(&read_bytes(path)?)
}

pub fn write_checkpoint(model: &SurrogateModel, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<SurrogateModel> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn write_policy(policy: &AugPolicy, path: &Path) -> Result<()> {
    write_bytes(path, policy.to_text().as_bytes())
}

pub fn read_policy(path: &Path) -> Result<AugPolicy> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| ArmorError::Format(format!("policy file is not UTF-8: {e}")))?;
    AugPolicy::parse(&text)
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| ArmorError::Format(format!("{} is not UTF-8: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}
