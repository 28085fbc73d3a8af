//! Binary parameter checkpoints and replay snapshots.
//!
//! Both files share one framing, all integers little-endian:
//!
//! ```text
//! magic [4] | version u16 | precision u8 (32 or 64) | body | fnv1a-64 u64
//! ```
//!
//! A checkpoint body (`PVCK`) is `count u32` named tensors, each
//! `name_len u16 | name | rank u8 | dims u32×rank | values`. A replay body
//! (`PVRB`) is `count u32` buffers, each
//! `capacity u64 | obs_dim u32 | action_dim u32 | insert_count u64 | len u64 | values`.
//! The trailing checksum covers every preceding byte.

use std::fs;
use std::path::Path;

use popvec_core::algos::sac::SacState;
use popvec_core::algos::td3::Td3State;
use popvec_core::mlp::PopMlp;
use popvec_core::replay::ReplayBuffer;
use popvec_core::{PopTensor, Real};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVCK";
pub const REPLAY_MAGIC: &[u8; 4] = b"PVRB";
pub const VERSION: u16 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Checksum of the raw parameter bits of a network.
pub fn mlp_checksum<T: Real>(net: &PopMlp<T>) -> u64 {
    let mut bytes = Vec::new();
    for t in net.tensors() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    fnv1a(&bytes)
}

fn header(magic: &[u8; 4], precision: u8) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision);
    out
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Checks magic, version and checksum; returns the cursor after the
    /// header and the precision tag.
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Self, u8)> {
        if bytes.len() < 4 + 2 + 1 + 8 {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut c = Cursor {
            bytes: body,
            pos: 4,
        };
        let version = c.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let precision = c.take(1)?[0];
        if precision != 32 && precision != 64 {
            return Err(Error::Format(format!("unknown precision tag {precision}")));
        }
        Ok((c, precision))
    }

    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `count` values stored at `precision`, converted to `T`.
    fn values<T: Real>(&mut self, count: usize, precision: u8) -> Result<Vec<T>> {
        let width = precision as usize / 8;
        let raw = self.take(
            count
                .checked_mul(width)
                .ok_or_else(|| Error::Format("value count overflows".into()))?,
        )?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match precision {
                32 => T::of(f32::read_le(c) as f64),
                _ => T::of(f64::read_le(c)),
            })
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_tensors<T: Real>(tensors: &[(String, &PopTensor<T>)]) -> Vec<u8> {
    let mut out = header(CHECKPOINT_MAGIC, T::TAG);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    seal(out)
}

/// Decodes a checkpoint stored at either precision into `T`.
pub fn decode_tensors<T: Real>(bytes: &[u8]) -> Result<Vec<(String, PopTensor<T>)>> {
    let (mut c, precision) = Cursor::open(bytes, CHECKPOINT_MAGIC)?;
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = c.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let data = c.values(numel, precision)?;
        out.push((name, PopTensor::from_vec(&shape, data)?));
    }
    c.finish()?;
    Ok(out)
}

/// Agents whose parameters can be written to and restored from a checkpoint.
pub trait Checkpoint<T: Real> {
    fn named_tensors(&self) -> Vec<(String, &PopTensor<T>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut PopTensor<T>)>;
}

fn mlp_entries<'a, T: Real>(prefix: &str, net: &'a PopMlp<T>) -> Vec<(String, &'a PopTensor<T>)> {
    net.layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            [
                (format!("{prefix}/{l}/weight"), &layer.weight),
                (format!("{prefix}/{l}/bias"), &layer.bias),
            ]
        })
        .collect()
}

fn mlp_entries_mut<'a, T: Real>(
    prefix: &str,
    net: &'a mut PopMlp<T>,
) -> Vec<(String, &'a mut PopTensor<T>)> {
    net.layers
        .iter_mut()
        .enumerate()
        .flat_map(|(l, layer)| {
            [
                (format!("{prefix}/{l}/weight"), &mut layer.weight),
                (format!("{prefix}/{l}/bias"), &mut layer.bias),
            ]
        })
        .collect()
}

impl<T: Real> Checkpoint<T> for Td3State<T> {
    fn named_tensors(&self) -> Vec<(String, &PopTensor<T>)> {
        let mut v = mlp_entries("policy", &self.policy);
        v.extend(mlp_entries("target_policy", &self.target_policy));
        for i in 0..2 {
            v.extend(mlp_entries(&format!("critic{i}"), &self.critics[i]));
            v.extend(mlp_entries(
                &format!("target_critic{i}"),
                &self.target_critics[i],
            ));
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut PopTensor<T>)> {
        let mut v = mlp_entries_mut("policy", &mut self.policy);
        v.extend(mlp_entries_mut("target_policy", &mut self.target_policy));
        let [c0, c1] = &mut self.critics;
        let [t0, t1] = &mut self.target_critics;
        v.extend(mlp_entries_mut("critic0", c0));
        v.extend(mlp_entries_mut("target_critic0", t0));
        v.extend(mlp_entries_mut("critic1", c1));
        v.extend(mlp_entries_mut("target_critic1", t1));
        v
    }
}

impl<T: Real> Checkpoint<T> for SacState<T> {
    fn named_tensors(&self) -> Vec<(String, &PopTensor<T>)> {
        let mut v = mlp_entries("policy", &self.policy);
        for i in 0..2 {
            v.extend(mlp_entries(&format!("critic{i}"), &self.critics[i]));
            v.extend(mlp_entries(
                &format!("target_critic{i}"),
                &self.target_critics[i],
            ));
        }
        v.push(("log_alpha".into(), &self.log_alpha));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut PopTensor<T>)> {
        let mut v = mlp_entries_mut("policy", &mut self.policy);
        let [c0, c1] = &mut self.critics;
        let [t0, t1] = &mut self.target_critics;
        v.extend(mlp_entries_mut("critic0", c0));
        v.extend(mlp_entries_mut("target_critic0", t0));
        v.extend(mlp_entries_mut("critic1", c1));
        v.extend(mlp_entries_mut("target_critic1", t1));
        v.push(("log_alpha".into(), &mut self.log_alpha));
        v
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    // Write then rename so readers never see a half-written file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn save_checkpoint<T: Real, A: Checkpoint<T>>(path: &Path, agent: &A) -> Result<()> {
    write_file(path, &encode_tensors(&agent.named_tensors()))
}

/// Overwrites every tensor of `agent` from the file; names and shapes must
/// match exactly.
pub fn load_checkpoint<T: Real, A: Checkpoint<T>>(path: &Path, agent: &mut A) -> Result<()> {
    let mut stored = decode_tensors::<T>(&read_file(path)?)?;
    let targets = agent.named_tensors_mut();
    if stored.len() != targets.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, agent has {}",
            stored.len(),
            targets.len()
        )));
    }
    for (name, dst) in targets {
        let pos = stored
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        let (_, src) = stored.swap_remove(pos);
        if src.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "{name}: stored shape {:?}, agent shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src;
    }
    Ok(())
}

pub fn encode_replay<T: Real>(buffers: &[&ReplayBuffer<T>]) -> Vec<u8> {
    let mut out = header(REPLAY_MAGIC, T::TAG);
    out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
    for b in buffers {
        let (inserts, rows) = b.raw_parts();
        out.extend_from_slice(&(b.capacity() as u64).to_le_bytes());
        out.extend_from_slice(&(b.obs_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(b.action_dim() as u32).to_le_bytes());
        out.extend_from_slice(&inserts.to_le_bytes());
        out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
        for &v in rows {
            v.write_le(&mut out);
        }
    }
    seal(out)
}

pub fn decode_replay<T: Real>(bytes: &[u8]) -> Result<Vec<ReplayBuffer<T>>> {
    let (mut c, precision) = Cursor::open(bytes, REPLAY_MAGIC)?;
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let capacity = c.u64()? as usize;
        let od = c.u32()? as usize;
        let ad = c.u32()? as usize;
        let inserts = c.u64()?;
        let len = c.u64()? as usize;
        let rows = c.values(len, precision)?;
        out.push(ReplayBuffer::from_raw_parts(
            capacity, od, ad, inserts, rows,
        )?);
    }
    c.finish()?;
    Ok(out)
}

pub fn save_replay<T: Real>(path: &Path, buffers: &[&ReplayBuffer<T>]) -> Result<()> {
    write_file(path, &encode_replay(buffers))
}

pub fn load_replay<T: Real>(path: &Path) -> Result<Vec<ReplayBuffer<T>>> {
    decode_replay(&read_file(path)?)
}
