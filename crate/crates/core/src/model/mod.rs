//! The forecasting network: spatial encoder, the five-group dual
//! classical/quantum temporal encoder, and the fusion head.
//!
//! All forward builders operate on batched tensors (`[B, ..]`) on one tape,
//! because batch normalization in train mode couples the samples of a batch.
//! Single-sample prediction wraps a batch of one in eval mode.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use params::{
    AblationFlags, BnParams, Conv1dParams, FfbParams, LinearParams, LtemParams, Param,
    QltemParams, SebParams, SquareMambaParams, SsmParams,
};

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tape::{ActivationKind, Mode, Tape, ValueId};
use crate::tensor::Tensor;

/// Fixed dimensions of the window layout and the encoder widths.
pub mod layout {
    /// History length in months.
    pub const MONTHS: usize = 15;
    /// Meteorological variables per month.
    pub const VARS: usize = 7;
    /// Temporal groups.
    pub const GROUPS: usize = 5;
    /// Months per group.
    pub const GROUP_LEN: usize = 3;
    /// Spatial window side (3x3 neighborhood).
    pub const WINDOW: usize = 3;
    /// Flattened window length (months x variables).
    pub const FLAT: usize = MONTHS * VARS;
    /// Hidden state size per channel in the selective scan.
    pub const STATE_DIM: usize = 16;
    /// Expanded channel width inside each group encoder.
    pub const INNER_DIM: usize = 14;
    /// Hidden width of the fusion head's first channel map.
    pub const FFB_HIDDEN: usize = 14;
}

// ---------------------------------------------------------------------------
// parameter binding
// ---------------------------------------------------------------------------

pub struct LinIds {
    pub w: ValueId,
    pub b: ValueId,
}

pub struct ConvIds {
    pub k: ValueId,
    pub b: ValueId,
}

pub struct SsmIds {
    pub w_delta: ValueId,
    pub b_delta: ValueId,
    pub w_b: ValueId,
    pub b_b: ValueId,
    pub w_c: ValueId,
    pub b_c: ValueId,
    pub a: ValueId,
    pub d: ValueId,
}

pub struct BnIds {
    pub gamma: ValueId,
    pub beta: ValueId,
}

pub struct SebIds {
    pub kernel: ValueId,
    pub bias: ValueId,
}

pub struct LtemIds {
    pub lp1: LinIds,
    pub conv1: ConvIds,
    pub lp2: LinIds,
    pub ssm: SsmIds,
    pub lp3: LinIds,
    pub bn: BnIds,
    pub conv2: ConvIds,
}

pub struct FfbIds {
    pub conv1: LinIds,
    pub conv2: LinIds,
    pub bn: BnIds,
    pub fc: LinIds,
}

/// Tape leaves for every trainable tensor, plus the flat list in `visit`
/// order for the gradient harvest.
pub struct ModelIds {
    pub seb: Option<SebIds>,
    pub ltem: Vec<LtemIds>,
    pub qltem: Option<Vec<ValueId>>,
    pub ffb: FfbIds,
    pub flat: Vec<ValueId>,
}

/// Register every parameter as a tape leaf. The flat order matches
/// `SquareMambaParams::visit`.
pub fn bind(tape: &mut Tape, params: &SquareMambaParams) -> ModelIds {
    let mut flat = Vec::new();
    let mut leaf = |tape: &mut Tape, p: &Param| {
        let id = tape.variable(p.value.clone());
        flat.push(id);
        id
    };
    let seb = params.seb.as_ref().map(|s| SebIds {
        kernel: leaf(tape, &s.kernel),
        bias: leaf(tape, &s.bias),
    });
    let ltem = params
        .ltem
        .iter()
        .map(|l| LtemIds {
            lp1: LinIds { w: leaf(tape, &l.lp1.w), b: leaf(tape, &l.lp1.b) },
            conv1: ConvIds { k: leaf(tape, &l.conv1.k), b: leaf(tape, &l.conv1.b) },
            lp2: LinIds { w: leaf(tape, &l.lp2.w), b: leaf(tape, &l.lp2.b) },
            ssm: SsmIds {
                w_delta: leaf(tape, &l.ssm.w_delta),
                b_delta: leaf(tape, &l.ssm.b_delta),
                w_b: leaf(tape, &l.ssm.w_b),
                b_b: leaf(tape, &l.ssm.b_b),
                w_c: leaf(tape, &l.ssm.w_c),
                b_c: leaf(tape, &l.ssm.b_c),
                a: leaf(tape, &l.ssm.a),
                d: leaf(tape, &l.ssm.d),
            },
            lp3: LinIds { w: leaf(tape, &l.lp3.w), b: leaf(tape, &l.lp3.b) },
            bn: BnIds { gamma: leaf(tape, &l.bn.gamma), beta: leaf(tape, &l.bn.beta) },
            conv2: ConvIds { k: leaf(tape, &l.conv2.k), b: leaf(tape, &l.conv2.b) },
        })
        .collect();
    let qltem = params
        .qltem
        .as_ref()
        .map(|qs| qs.iter().map(|q| leaf(tape, &q.angles)).collect());
    let ffb = FfbIds {
        conv1: LinIds { w: leaf(tape, &params.ffb.conv1.w), b: leaf(tape, &params.ffb.conv1.b) },
        conv2: LinIds { w: leaf(tape, &params.ffb.conv2.w), b: leaf(tape, &params.ffb.conv2.b) },
        bn: BnIds {
            gamma: leaf(tape, &params.ffb.bn.gamma),
            beta: leaf(tape, &params.ffb.bn.beta),
        },
        fc: LinIds { w: leaf(tape, &params.ffb.fc.w), b: leaf(tape, &params.ffb.fc.b) },
    };
    ModelIds { seb, ltem, qltem, ffb, flat }
}

/// After `tape.backward`, add each leaf's gradient into the matching
/// parameter's accumulator.
pub fn harvest_grads(tape: &Tape, ids: &ModelIds, params: &mut SquareMambaParams) {
    for ((_, p), id) in params.visit_mut().into_iter().zip(&ids.flat) {
        p.grad.add_assign(tape.grad(*id));
    }
}

/// Phase of a forward pass. Train mode carries the RNG that drives dropout.
pub enum Phase<'r> {
    Train { rng: &'r mut ChaCha12Rng },
    Eval,
}

impl Phase<'_> {
    fn mode(&self) -> Mode {
        match self {
            Phase::Train { .. } => Mode::Train,
            Phase::Eval => Mode::Eval,
        }
    }
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

/// Spatial encoding: `s = z + maxpool(leaky_relu(depthwise_conv(Tz)))`.
/// `z` is `[B, 105]`, `tz` is `[B, 105, 3, 3]`.
pub fn seb_forward(
    tape: &mut Tape,
    ids: &SebIds,
    z: ValueId,
    tz: ValueId,
) -> Result<ValueId> {
    let conv = tape.conv2d_depthwise(tz, ids.kernel, ids.bias)?;
    let act = tape.activation(ActivationKind::LeakyRelu02, conv);
    let pooled = tape.maxpool_spatial(act)?;
    tape.add(z, pooled)
}

/// Selective state-space scan over `[.., L, K]`, applied independently per
/// channel with input-dependent discretization.
pub fn sssm_scan(tape: &mut Tape, x: ValueId, ssm: &SsmIds) -> Result<ValueId> {
    let shape = tape.value(x).shape().to_vec();
    let (bsz, len, k, squeeze) = match shape[..] {
        [l, k] => (1, l, k, true),
        [b, l, k] => (b, l, k, false),
        _ => {
            return Err(Error::Shape(format!(
                "scan input must be [L, K] or [B, L, K], got {shape:?}"
            )))
        }
    };
    let state = tape.value(ssm.a).shape()[1];
    let x3 = if squeeze { tape.reshape(x, &[1, len, k])? } else { x };
    let mut h = tape.constant(Tensor::zeros(&[bsz, k, state]));
    let mut steps = Vec::with_capacity(len);
    for i in 0..len {
        let xi = tape.narrow(x3, 1, i, 1)?;
        let xi = tape.reshape(xi, &[bsz, k])?;
        let pre = tape.linear(xi, ssm.w_delta, ssm.b_delta)?;
        let delta = tape.softplus(pre);
        let b_i = tape.linear(xi, ssm.w_b, ssm.b_b)?;
        let c_i = tape.linear(xi, ssm.w_c, ssm.b_c)?;
        h = tape.ssm_step(h, xi, delta, b_i, ssm.a)?;
        let y_i = tape.ssm_read(h, c_i, xi, ssm.d)?;
        steps.push(tape.reshape(y_i, &[bsz, 1, k])?);
    }
    let y = tape.concat(1, &steps)?;
    if squeeze {
        tape.reshape(y, &[len, k])
    } else {
        Ok(y)
    }
}

/// Classical group encoder over one `[B, 3, 7]` slice.
pub fn ltem_forward(
    tape: &mut Tape,
    ids: &LtemIds,
    bn: &mut crate::tape::BnState,
    s_g: ValueId,
    mode: Mode,
) -> Result<ValueId> {
    let u = tape.linear(s_g, ids.lp1.w, ids.lp1.b)?;
    let u = tape.conv1d_temporal(u, ids.conv1.k, ids.conv1.b)?;
    let u = tape.activation(ActivationKind::Silu, u);
    let scanned = sssm_scan(tape, u, &ids.ssm)?;
    let gate_pre = tape.linear(s_g, ids.lp2.w, ids.lp2.b)?;
    let gate = tape.activation(ActivationKind::Silu, gate_pre);
    let gated = tape.mul(scanned, gate)?;
    let v = tape.linear(gated, ids.lp3.w, ids.lp3.b)?;
    let v = tape.batchnorm(v, ids.bn.gamma, ids.bn.beta, bn, mode)?;
    let v = tape.conv1d_temporal(v, ids.conv2.k, ids.conv2.b)?;
    Ok(tape.activation(ActivationKind::Elu, v))
}

/// Quantum group encoder: one 3-qubit circuit per variable over its
/// 3-month sequence. Output entries are Z expectations in [-1, 1].
pub fn qltem_forward(tape: &mut Tape, angles: ValueId, s_g: ValueId) -> Result<ValueId> {
    let by_var = tape.transpose_last2(s_g)?; // [B, 7, 3]
    let measured = tape.quantum_groups(by_var, angles)?;
    tape.transpose_last2(measured) // back to [B, 3, 7]
}

/// Temporal encoding: split `[B, 15, 7]` into five 3-month groups, run the
/// classical and (unless ablated) quantum encoders in parallel, sum, and
/// concatenate along the month axis.
pub fn teb_forward(
    tape: &mut Tape,
    ids: &ModelIds,
    params: &mut SquareMambaParams,
    s: ValueId,
    mode: Mode,
) -> Result<ValueId> {
    let mut groups = Vec::with_capacity(layout::GROUPS);
    for g in 0..layout::GROUPS {
        let s_g = tape.narrow(s, 1, g * layout::GROUP_LEN, layout::GROUP_LEN)?;
        let classical =
            ltem_forward(tape, &ids.ltem[g], &mut params.ltem[g].bn.state, s_g, mode)?;
        let combined = match &ids.qltem {
            Some(q) => {
                let quantum = qltem_forward(tape, q[g], s_g)?;
                tape.add(classical, quantum)?
            }
            None => classical,
        };
        groups.push(combined);
    }
    tape.concat(1, &groups)
}

/// Fusion head: residual 1x1 refinement with dropout, batch norm, and the
/// final flatten-to-scalar projection. Returns `[B]`.
pub fn ffb_forward(
    tape: &mut Tape,
    ids: &FfbIds,
    bn: &mut crate::tape::BnState,
    f: ValueId,
    phase: &mut Phase,
) -> Result<ValueId> {
    let bsz = tape.value(f).shape()[0];
    let mode = phase.mode();
    let hidden = tape.linear(f, ids.conv1.w, ids.conv1.b)?;
    let hidden = tape.activation(ActivationKind::Gelu, hidden);
    let hidden = match phase {
        Phase::Train { rng } => tape.dropout(hidden, 0.2, Mode::Train, *rng)?,
        Phase::Eval => hidden,
    };
    let refined = tape.linear(hidden, ids.conv2.w, ids.conv2.b)?;
    let refined = match phase {
        Phase::Train { rng } => tape.dropout(refined, 0.2, Mode::Train, *rng)?,
        Phase::Eval => refined,
    };
    let sum = tape.add(f, refined)?;
    let normed = tape.batchnorm(sum, ids.bn.gamma, ids.bn.beta, bn, mode)?;
    let flat = tape.reshape(normed, &[bsz, layout::FLAT])?;
    let out = tape.linear(flat, ids.fc.w, ids.fc.b)?;
    tape.reshape(out, &[bsz])
}

/// Full forward pass: z `[B, 105]`, tz `[B, 105, 3, 3]` to predictions `[B]`
/// inside (-3, 3).
pub fn model_forward(
    tape: &mut Tape,
    ids: &ModelIds,
    params: &mut SquareMambaParams,
    z: ValueId,
    tz: ValueId,
    phase: &mut Phase,
) -> Result<ValueId> {
    let zs = tape.value(z).shape().to_vec();
    let ts = tape.value(tz).shape().to_vec();
    if zs.len() != 2 || zs[1] != layout::FLAT {
        return Err(Error::Shape(format!("window must be [B, {}], got {zs:?}", layout::FLAT)));
    }
    if ts != [zs[0], layout::FLAT, layout::WINDOW, layout::WINDOW] {
        return Err(Error::Shape(format!(
            "augmented window must be [B, {}, {}, {}], got {ts:?}",
            layout::FLAT,
            layout::WINDOW,
            layout::WINDOW
        )));
    }
    let s = match &ids.seb {
        Some(seb) => seb_forward(tape, seb, z, tz)?,
        None => z,
    };
    let s = tape.reshape(s, &[zs[0], layout::MONTHS, layout::VARS])?;
    let f = teb_forward(tape, ids, params, s, phase.mode())?;
    let fused = ffb_forward(tape, &ids.ffb, &mut params.ffb.bn.state, f, phase)?;
    Ok(tape.activation(ActivationKind::ScaledTanh3, fused))
}

/// Deterministic single-sample eval-mode prediction.
pub fn predict(params: &mut SquareMambaParams, z: &Tensor, tz: &Tensor) -> Result<f64> {
    let preds = predict_batch(params, std::slice::from_ref(&(z.clone(), tz.clone())))?;
    Ok(preds[0])
}

/// Eval-mode predictions for a slice of `(z, tz)` samples, processed in one
/// tape per chunk to bound memory.
pub fn predict_batch(
    params: &mut SquareMambaParams,
    samples: &[(Tensor, Tensor)],
) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let bsz = chunk.len();
        let mut z_data = Vec::with_capacity(bsz * layout::FLAT);
        let mut tz_data = Vec::with_capacity(bsz * layout::FLAT * 9);
        for (z, tz) in chunk {
            if z.shape() != [layout::FLAT]
                || tz.shape() != [layout::FLAT, layout::WINDOW, layout::WINDOW]
            {
                return Err(Error::Shape(format!(
                    "sample shapes {:?}/{:?} do not match the window layout",
                    z.shape(),
                    tz.shape()
                )));
            }
            z_data.extend_from_slice(z.data());
            tz_data.extend_from_slice(tz.data());
        }
        let mut tape = Tape::new();
        let z_id = tape.constant(Tensor::from_vec(&[bsz, layout::FLAT], z_data)?);
        let tz_id = tape.constant(Tensor::from_vec(
            &[bsz, layout::FLAT, layout::WINDOW, layout::WINDOW],
            tz_data,
        )?);
        let ids = bind(&mut tape, params);
        let pred = model_forward(&mut tape, &ids, params, z_id, tz_id, &mut Phase::Eval)?;
        out.extend_from_slice(tape.value(pred).data());
    }
    Ok(out)
}
