//! Learnable parameters of the forecasting network.
//!
//! Parameters live outside the tape and are re-registered as leaves on every
//! forward pass. `visit`/`visit_mut` expose them in one fixed order that the
//! optimizer, the gradient harvest, and the checkpoint format all share.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tape::BnState;
use crate::tensor::Tensor;

use super::layout;

/// One learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Param {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Param::new(Tensor::from_vec(shape, data).expect("generated data matches shape"))
}

fn constant(shape: &[usize], v: f64) -> Param {
    Param::new(Tensor::full(shape, v))
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Param,
    pub b: Param,
}

impl LinearParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng, n_in: usize, n_out: usize) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        LinearParams { w: uniform(rng, &[n_in, n_out], bound), b: uniform(rng, &[n_out], bound) }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dParams {
    pub k: Param,
    pub b: Param,
}

impl Conv1dParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng, k_in: usize, k_out: usize) -> Self {
        let bound = 1.0 / (3.0 * k_in as f64).sqrt();
        Conv1dParams { k: uniform(rng, &[3, k_in, k_out], bound), b: uniform(rng, &[k_out], bound) }
    }
}

/// Selective state-space parameters for one group's scan: the input-dependent
/// discretization (delta) plus B/C projections, the diagonal state decay
/// matrix, and the per-channel skip.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub w_delta: Param,
    pub b_delta: Param,
    pub w_b: Param,
    pub b_b: Param,
    pub w_c: Param,
    pub b_c: Param,
    pub a: Param,
    pub d: Param,
}

impl SsmParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng, channels: usize, state: usize) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        // softplus(b_delta) ~ 0.1 keeps exp(delta * a) contractive at start
        let b_delta0 = (0.1f64.exp() - 1.0).ln();
        SsmParams {
            w_delta: uniform(rng, &[channels, channels], bound),
            b_delta: constant(&[channels], b_delta0),
            w_b: uniform(rng, &[channels, state], bound),
            b_b: uniform(rng, &[state], bound),
            w_c: uniform(rng, &[channels, state], bound),
            b_c: uniform(rng, &[state], bound),
            a: constant(&[channels, state], -1.0),
            d: constant(&[channels], 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Param,
    pub beta: Param,
    pub state: BnState,
}

impl BnParams {
    pub(crate) fn init(channels: usize) -> Self {
        BnParams {
            gamma: constant(&[channels], 1.0),
            beta: constant(&[channels], 0.0),
            state: BnState::new(channels),
        }
    }
}

/// Spatial encoder: one 2x2 depthwise kernel and bias per channel.
#[derive(Debug, Clone)]
pub struct SebParams {
    pub kernel: Param,
    pub bias: Param,
}

impl SebParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng) -> Self {
        let bound = 0.5; // 1/sqrt(4), the depthwise fan-in
        SebParams {
            kernel: uniform(rng, &[layout::FLAT, 2, 2], bound),
            bias: uniform(rng, &[layout::FLAT], bound),
        }
    }
}

/// Classical temporal encoder for one 3-month group.
#[derive(Debug, Clone)]
pub struct LtemParams {
    pub lp1: LinearParams,
    pub conv1: Conv1dParams,
    pub lp2: LinearParams,
    pub ssm: SsmParams,
    pub lp3: LinearParams,
    pub bn: BnParams,
    pub conv2: Conv1dParams,
}

impl LtemParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng) -> Self {
        LtemParams {
            lp1: LinearParams::init(rng, layout::VARS, layout::INNER_DIM),
            conv1: Conv1dParams::init(rng, layout::INNER_DIM, layout::INNER_DIM),
            lp2: LinearParams::init(rng, layout::VARS, layout::INNER_DIM),
            ssm: SsmParams::init(rng, layout::INNER_DIM, layout::STATE_DIM),
            lp3: LinearParams::init(rng, layout::INNER_DIM, layout::VARS),
            bn: BnParams::init(layout::VARS),
            conv2: Conv1dParams::init(rng, layout::VARS, layout::VARS),
        }
    }
}

/// Quantum temporal encoder for one group: 11 angles per variable, no
/// sharing across variables or groups.
#[derive(Debug, Clone)]
pub struct QltemParams {
    pub angles: Param,
}

impl QltemParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng) -> Self {
        // near-identity circuits at start; the classical branch leads early
        QltemParams { angles: uniform(rng, &[layout::VARS, 11], 0.1) }
    }
}

/// Fusion head: two 1x1 channel maps with dropout, batch norm over the
/// residual sum, and the final 105 -> 1 projection.
#[derive(Debug, Clone)]
pub struct FfbParams {
    pub conv1: LinearParams,
    pub conv2: LinearParams,
    pub bn: BnParams,
    pub fc: LinearParams,
}

impl FfbParams {
    pub(crate) fn init(rng: &mut ChaCha12Rng) -> Self {
        FfbParams {
            conv1: LinearParams::init(rng, layout::VARS, layout::FFB_HIDDEN),
            conv2: LinearParams::init(rng, layout::FFB_HIDDEN, layout::VARS),
            bn: BnParams::init(layout::VARS),
            fc: LinearParams::init(rng, layout::FLAT, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    pub no_seb: bool,
    pub no_qltem: bool,
}

/// The complete learnable state of the network.
#[derive(Debug, Clone)]
pub struct SquareMambaParams {
    pub flags: AblationFlags,
    pub seb: Option<SebParams>,
    pub ltem: Vec<LtemParams>,
    pub qltem: Option<Vec<QltemParams>>,
    pub ffb: FfbParams,
}

impl SquareMambaParams {
    pub fn init(flags: AblationFlags, rng: &mut ChaCha12Rng) -> Self {
        let seb = (!flags.no_seb).then(|| SebParams::init(rng));
        let ltem = (0..layout::GROUPS).map(|_| LtemParams::init(rng)).collect();
        let qltem = (!flags.no_qltem)
            .then(|| (0..layout::GROUPS).map(|_| QltemParams::init(rng)).collect());
        let ffb = FfbParams::init(rng);
        SquareMambaParams { flags, seb, ltem, qltem, ffb }
    }

    /// Every trainable tensor in the fixed traversal order shared by the
    /// optimizer, gradient harvest, and checkpoint format.
    pub fn visit(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        if let Some(seb) = &self.seb {
            out.push(("seb.kernel".to_string(), &seb.kernel));
            out.push(("seb.bias".to_string(), &seb.bias));
        }
        for (g, l) in self.ltem.iter().enumerate() {
            out.push((format!("ltem.{g}.lp1.w"), &l.lp1.w));
            out.push((format!("ltem.{g}.lp1.b"), &l.lp1.b));
            out.push((format!("ltem.{g}.conv1.k"), &l.conv1.k));
            out.push((format!("ltem.{g}.conv1.b"), &l.conv1.b));
            out.push((format!("ltem.{g}.lp2.w"), &l.lp2.w));
            out.push((format!("ltem.{g}.lp2.b"), &l.lp2.b));
            out.push((format!("ltem.{g}.ssm.w_delta"), &l.ssm.w_delta));
            out.push((format!("ltem.{g}.ssm.b_delta"), &l.ssm.b_delta));
            out.push((format!("ltem.{g}.ssm.w_b"), &l.ssm.w_b));
            out.push((format!("ltem.{g}.ssm.b_b"), &l.ssm.b_b));
            out.push((format!("ltem.{g}.ssm.w_c"), &l.ssm.w_c));
            out.push((format!("ltem.{g}.ssm.b_c"), &l.ssm.b_c));
            out.push((format!("ltem.{g}.ssm.a"), &l.ssm.a));
            out.push((format!("ltem.{g}.ssm.d"), &l.ssm.d));
            out.push((format!("ltem.{g}.lp3.w"), &l.lp3.w));
            out.push((format!("ltem.{g}.lp3.b"), &l.lp3.b));
            out.push((format!("ltem.{g}.bn.gamma"), &l.bn.gamma));
            out.push((format!("ltem.{g}.bn.beta"), &l.bn.beta));
            out.push((format!("ltem.{g}.conv2.k"), &l.conv2.k));
            out.push((format!("ltem.{g}.conv2.b"), &l.conv2.b));
        }
        if let Some(q) = &self.qltem {
            for (g, group) in q.iter().enumerate() {
                out.push((format!("qltem.{g}.angles"), &group.angles));
            }
        }
        out.push(("ffb.conv1.w".to_string(), &self.ffb.conv1.w));
        out.push(("ffb.conv1.b".to_string(), &self.ffb.conv1.b));
        out.push(("ffb.conv2.w".to_string(), &self.ffb.conv2.w));
        out.push(("ffb.conv2.b".to_string(), &self.ffb.conv2.b));
        out.push(("ffb.bn.gamma".to_string(), &self.ffb.bn.gamma));
        out.push(("ffb.bn.beta".to_string(), &self.ffb.bn.beta));
        out.push(("ffb.fc.w".to_string(), &self.ffb.fc.w));
        out.push(("ffb.fc.b".to_string(), &self.ffb.fc.b));
        out
    }

    /// Mutable traversal in exactly the `visit` order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        if let Some(seb) = &mut self.seb {
            out.push(("seb.kernel".to_string(), &mut seb.kernel));
            out.push(("seb.bias".to_string(), &mut seb.bias));
        }
        for (g, l) in self.ltem.iter_mut().enumerate() {
            out.push((format!("ltem.{g}.lp1.w"), &mut l.lp1.w));
            out.push((format!("ltem.{g}.lp1.b"), &mut l.lp1.b));
            out.push((format!("ltem.{g}.conv1.k"), &mut l.conv1.k));
            out.push((format!("ltem.{g}.conv1.b"), &mut l.conv1.b));
            out.push((format!("ltem.{g}.lp2.w"), &mut l.lp2.w));
            out.push((format!("ltem.{g}.lp2.b"), &mut l.lp2.b));
            out.push((format!("ltem.{g}.ssm.w_delta"), &mut l.ssm.w_delta));
            out.push((format!("ltem.{g}.ssm.b_delta"), &mut l.ssm.b_delta));
            out.push((format!("ltem.{g}.ssm.w_b"), &mut l.ssm.w_b));
            out.push((format!("ltem.{g}.ssm.b_b"), &mut l.ssm.b_b));
            out.push((format!("ltem.{g}.ssm.w_c"), &mut l.ssm.w_c));
            out.push((format!("ltem.{g}.ssm.b_c"), &mut l.ssm.b_c));
            out.push((format!("ltem.{g}.ssm.a"), &mut l.ssm.a));
            out.push((format!("ltem.{g}.ssm.d"), &mut l.ssm.d));
            out.push((format!("ltem.{g}.lp3.w"), &mut l.lp3.w));
            out.push((format!("ltem.{g}.lp3.b"), &mut l.lp3.b));
            out.push((format!("ltem.{g}.bn.gamma"), &mut l.bn.gamma));
            out.push((format!("ltem.{g}.bn.beta"), &mut l.bn.beta));
            out.push((format!("ltem.{g}.conv2.k"), &mut l.conv2.k));
            out.push((format!("ltem.{g}.conv2.b"), &mut l.conv2.b));
        }
        if let Some(q) = &mut self.qltem {
            for (g, group) in q.iter_mut().enumerate() {
                out.push((format!("qltem.{g}.angles"), &mut group.angles));
            }
        }
        out.push(("ffb.conv1.w".to_string(), &mut self.ffb.conv1.w));
        out.push(("ffb.conv1.b".to_string(), &mut self.ffb.conv1.b));
        out.push(("ffb.conv2.w".to_string(), &mut self.ffb.conv2.w));
        out.push(("ffb.conv2.b".to_string(), &mut self.ffb.conv2.b));
        out.push(("ffb.bn.gamma".to_string(), &mut self.ffb.bn.gamma));
        out.push(("ffb.bn.beta".to_string(), &mut self.ffb.bn.beta));
        out.push(("ffb.fc.w".to_string(), &mut self.ffb.fc.w));
        out.push(("ffb.fc.b".to_string(), &mut self.ffb.fc.b));
        out
    }

    /// Batch-norm running statistics, also in a fixed order.
    pub fn bn_states(&self) -> Vec<(String, &BnState)> {
        let mut out: Vec<(String, &BnState)> = self
            .ltem
            .iter()
            .enumerate()
            .map(|(g, l)| (format!("ltem.{g}.bn"), &l.bn.state))
            .collect();
        out.push(("ffb.bn".to_string(), &self.ffb.bn.state));
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState)> {
        let mut out: Vec<(String, &mut BnState)> = self
            .ltem
            .iter_mut()
            .enumerate()
            .map(|(g, l)| (format!("ltem.{g}.bn"), &mut l.bn.state))
            .collect();
        out.push(("ffb.bn".to_string(), &mut self.ffb.bn.state));
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.visit().iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.visit_mut() {
            p.zero_grad();
        }
    }
}
