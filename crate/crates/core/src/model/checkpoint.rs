//! Versioned binary checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, a JSON
//! manifest (layout constants, ablation flags, seed, epoch, parameter table),
//! then the raw 64-bit parameter and batch-norm buffers in manifest order.
//! Raw bytes make the round trip bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{AblationFlags, SquareMambaParams};
use super::layout;

const MAGIC: &[u8; 8] = b"SQMCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
struct LayoutInfo {
    months: usize,
    vars: usize,
    groups: usize,
    group_len: usize,
    window: usize,
    state_dim: usize,
    inner_dim: usize,
    ffb_hidden: usize,
}

impl LayoutInfo {
    fn current() -> Self {
        LayoutInfo {
            months: layout::MONTHS,
            vars: layout::VARS,
            groups: layout::GROUPS,
            group_len: layout::GROUP_LEN,
            window: layout::WINDOW,
            state_dim: layout::STATE_DIM,
            inner_dim: layout::INNER_DIM,
            ffb_hidden: layout::FFB_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BnInfo {
    name: String,
    channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    layout: LayoutInfo,
    flags: AblationFlags,
    seed: u64,
    epoch: u32,
    params: Vec<ParamInfo>,
    bn: Vec<BnInfo>,
}

/// Non-parameter metadata recovered from a checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointMeta {
    pub flags: AblationFlags,
    pub seed: u64,
    pub epoch: u32,
}

pub fn save_checkpoint(
    params: &SquareMambaParams,
    seed: u64,
    epoch: u32,
    path: &Path,
) -> Result<()> {
    let manifest = Manifest {
        layout: LayoutInfo::current(),
        flags: params.flags,
        seed,
        epoch,
        params: params
            .visit()
            .iter()
            .map(|(name, p)| ParamInfo { name: name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        bn: params
            .bn_states()
            .iter()
            .map(|(name, st)| BnInfo { name: name.clone(), channels: st.running_mean.len() })
            .collect(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Io(std::io::Error::other(e)))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (_, p) in params.visit() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (_, st) in params.bn_states() {
        for v in st.running_mean.iter().chain(&st.running_var) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SquareMambaParams, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Version(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut off = MAGIC.len();
    let manifest_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() < off + manifest_len {
        return Err(Error::Version("checkpoint truncated in manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[off..off + manifest_len])
        .map_err(|e| Error::Version(format!("bad checkpoint manifest: {e}")))?;
    off += manifest_len;

    if manifest.layout != LayoutInfo::current() {
        return Err(Error::Version(
            "checkpoint layout does not match this build's window layout".into(),
        ));
    }

    // Build a skeleton with the right shapes, then overwrite every buffer.
    let mut params = SquareMambaParams::init(manifest.flags, &mut ChaCha12Rng::seed_from_u64(0));

    {
        let expected: Vec<(String, Vec<usize>)> = params
            .visit()
            .iter()
            .map(|(n, p)| (n.clone(), p.value.shape().to_vec()))
            .collect();
        if expected.len() != manifest.params.len()
            || expected
                .iter()
                .zip(&manifest.params)
                .any(|((en, es), m)| *en != m.name || *es != m.shape)
        {
            return Err(Error::Version(
                "checkpoint parameter table does not match this build".into(),
            ));
        }
    }

    let read_f64s = |off: &mut usize, n: usize| -> Result<Vec<f64>> {
        if bytes.len() < *off + n * 8 {
            return Err(Error::Version("checkpoint truncated in data".into()));
        }
        let out = bytes[*off..*off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off += n * 8;
        Ok(out)
    };

    for (_, p) in params.visit_mut() {
        let shape = p.value.shape().to_vec();
        let n = p.value.numel();
        let data = read_f64s(&mut off, n)?;
        p.value = Tensor::from_vec(&shape, data)?;
        p.zero_grad();
    }
    for ((_, st), info) in params.bn_states_mut().into_iter().zip(&manifest.bn) {
        if st.running_mean.len() != info.channels {
            return Err(Error::Version("checkpoint batch-norm table mismatch".into()));
        }
        st.running_mean = read_f64s(&mut off, info.channels)?;
        st.running_var = read_f64s(&mut off, info.channels)?;
    }
    if off != bytes.len() {
        return Err(Error::Version("checkpoint has trailing bytes".into()));
    }
    Ok((params, CheckpointMeta { flags: manifest.flags, seed: manifest.seed, epoch: manifest.epoch }))
}
