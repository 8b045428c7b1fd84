//! Exact statevector simulation of the 3-qubit group circuit.
//!
//! The register holds 8 complex amplitudes indexed by basis state
//! |q0 q1 q2> with q0 the most significant bit. Gates are applied in place
//! and preserve the norm. Gradients use the two-point parameter-shift rule,
//! which is exact here because RX, RY and Ising-XX all have involutory
//! generators.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;

use crate::error::{Error, Result};

const WIRES: usize = 3;
const DIM: usize = 8;

/// Counts every group-circuit execution, including parameter-shift reruns.
/// Lets tests assert that ablated configurations never touch the simulator.
static CIRCUIT_RUNS: AtomicU64 = AtomicU64::new(0);

pub fn circuit_run_count() -> u64 {
    CIRCUIT_RUNS.load(Ordering::Relaxed)
}

pub fn reset_circuit_run_count() {
    CIRCUIT_RUNS.store(0, Ordering::Relaxed);
}

fn check_wire(wire: usize) -> Result<()> {
    if wire >= WIRES {
        return Err(Error::Usage(format!("wire {wire} out of range (0..{WIRES})")));
    }
    Ok(())
}

/// Bit mask selecting `wire` in a basis index (q0 is the MSB).
fn wire_mask(wire: usize) -> usize {
    1 << (WIRES - 1 - wire)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: [Complex64; DIM],
}

impl StateVector {
    /// |000>
    pub fn zero_state() -> Self {
        let mut amps = [Complex64::new(0.0, 0.0); DIM];
        amps[0] = Complex64::new(1.0, 0.0);
        StateVector { amps }
    }

    pub fn from_amplitudes(amps: [Complex64; DIM]) -> Self {
        StateVector { amps }
    }

    pub fn amplitudes(&self) -> &[Complex64; DIM] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn probabilities(&self) -> [f64; DIM] {
        let mut p = [0.0; DIM];
        for (i, a) in self.amps.iter().enumerate() {
            p[i] = a.norm_sqr();
        }
        p
    }

    /// Apply an arbitrary single-qubit unitary to `wire`.
    fn apply_1q(&mut self, wire: usize, u: [[Complex64; 2]; 2]) {
        let mask = wire_mask(wire);
        for i in 0..DIM {
            if i & mask == 0 {
                let j = i | mask;
                let a0 = self.amps[i];
                let a1 = self.amps[j];
                self.amps[i] = u[0][0] * a0 + u[0][1] * a1;
                self.amps[j] = u[1][0] * a0 + u[1][1] * a1;
            }
        }
    }

    pub fn apply_ry(&mut self, wire: usize, theta: f64) -> Result<()> {
        check_wire(wire)?;
        self.apply_1q(wire, ry_matrix(theta));
        Ok(())
    }

    pub fn apply_rx(&mut self, wire: usize, theta: f64) -> Result<()> {
        check_wire(wire)?;
        self.apply_1q(wire, rx_matrix(theta));
        Ok(())
    }

    /// Ising coupling exp(-i(theta/2) X(a)X(b)).
    pub fn apply_xx(&mut self, wire_a: usize, wire_b: usize, theta: f64) -> Result<()> {
        check_wire(wire_a)?;
        check_wire(wire_b)?;
        if wire_a == wire_b {
            return Err(Error::Usage("XX gate needs two distinct wires".into()));
        }
        let d = Complex64::new((theta / 2.0).cos(), 0.0);
        let g = Complex64::new(0.0, -(theta / 2.0).sin());
        let ma = wire_mask(wire_a);
        let mb = wire_mask(wire_b);
        // X(a)X(b) pairs each index with the one where both wire bits flip.
        for i in 0..DIM {
            if i & ma == 0 && i & mb == 0 {
                let i00 = i;
                let i01 = i | mb;
                let i10 = i | ma;
                let i11 = i | ma | mb;
                let (a00, a01, a10, a11) =
                    (self.amps[i00], self.amps[i01], self.amps[i10], self.amps[i11]);
                self.amps[i00] = d * a00 + g * a11;
                self.amps[i11] = d * a11 + g * a00;
                self.amps[i01] = d * a01 + g * a10;
                self.amps[i10] = d * a10 + g * a01;
            }
        }
        Ok(())
    }

    /// Mixed-polarity Toffoli: X on `target` iff `ctrl_one` is |1> and
    /// `ctrl_zero` is |0>. A permutation and its own inverse.
    pub fn apply_ccnot(&mut self, ctrl_one: usize, ctrl_zero: usize, target: usize) -> Result<()> {
        check_wire(ctrl_one)?;
        check_wire(ctrl_zero)?;
        check_wire(target)?;
        if ctrl_one == ctrl_zero || ctrl_one == target || ctrl_zero == target {
            return Err(Error::Usage("CCNOT needs three distinct wires".into()));
        }
        let m1 = wire_mask(ctrl_one);
        let m0 = wire_mask(ctrl_zero);
        let mt = wire_mask(target);
        for i in 0..DIM {
            if i & m1 != 0 && i & m0 == 0 && i & mt == 0 {
                self.amps.swap(i, i | mt);
            }
        }
        Ok(())
    }

    /// <psi| Z(wire) |psi>; always real, magnitude at most 1.
    pub fn expect_z(&self, wire: usize) -> Result<f64> {
        check_wire(wire)?;
        let mask = wire_mask(wire);
        let mut e = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            let sign = if i & mask == 0 { 1.0 } else { -1.0 };
            e += sign * a.norm_sqr();
        }
        Ok(e)
    }
}

/// The 11 trainable angles of one group circuit, layer by layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupCircuitParams {
    pub ry1: [f64; 3],
    pub xx01: f64,
    pub rx: [f64; 3],
    pub xx12: f64,
    pub ry2: [f64; 3],
}

pub const GROUP_PARAM_COUNT: usize = 11;

impl GroupCircuitParams {
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != GROUP_PARAM_COUNT {
            return Err(Error::Shape(format!(
                "group circuit wants {GROUP_PARAM_COUNT} angles, got {}",
                v.len()
            )));
        }
        Ok(GroupCircuitParams {
            ry1: [v[0], v[1], v[2]],
            xx01: v[3],
            rx: [v[4], v[5], v[6]],
            xx12: v[7],
            ry2: [v[8], v[9], v[10]],
        })
    }

    pub fn to_flat(self) -> [f64; GROUP_PARAM_COUNT] {
        [
            self.ry1[0], self.ry1[1], self.ry1[2], self.xx01, self.rx[0], self.rx[1], self.rx[2],
            self.xx12, self.ry2[0], self.ry2[1], self.ry2[2],
        ]
    }
}

/// All 14 angles of one circuit execution: 3 embedding angles + 11 params.
fn run_flat(angles: &[f64; 14]) -> [f64; 3] {
    CIRCUIT_RUNS.fetch_add(1, Ordering::Relaxed);
    let mut st = StateVector::zero_state();
    for q in 0..3 {
        st.apply_1q(q, ry_matrix(angles[q]));
    }
    for q in 0..3 {
        st.apply_1q(q, ry_matrix(angles[3 + q]));
    }
    st.apply_xx(0, 1, angles[6]).expect("fixed wires");
    for q in 0..3 {
        st.apply_1q(q, rx_matrix(angles[7 + q]));
    }
    st.apply_xx(1, 2, angles[10]).expect("fixed wires");
    for q in 0..3 {
        st.apply_1q(q, ry_matrix(angles[11 + q]));
    }
    st.apply_ccnot(0, 1, 2).expect("fixed wires");
    st.apply_ccnot(1, 2, 0).expect("fixed wires");
    st.apply_ccnot(2, 0, 1).expect("fixed wires");
    [
        st.expect_z(0).expect("fixed wire"),
        st.expect_z(1).expect("fixed wire"),
        st.expect_z(2).expect("fixed wire"),
    ]
}

fn flat_angles(inputs: [f64; 3], params: &GroupCircuitParams) -> [f64; 14] {
    let p = params.to_flat();
    let mut a = [0.0; 14];
    a[..3].copy_from_slice(&inputs);
    a[3..].copy_from_slice(&p);
    a
}

/// Run one group circuit: RY data embedding, the five trainable layers,
/// the three mixed-polarity Toffolis, then Pauli-Z readout on every wire.
pub fn run_group_circuit(inputs: [f64; 3], params: &GroupCircuitParams) -> [f64; 3] {
    run_flat(&flat_angles(inputs, params))
}

/// Exact gradients of `upstream . <Z>` for the 3 embedding angles and the
/// 11 trainable angles via the two-point shift rule.
pub fn param_shift_grad(
    inputs: [f64; 3],
    params: &GroupCircuitParams,
    upstream: [f64; 3],
) -> ([f64; 3], [f64; GROUP_PARAM_COUNT]) {
    let base = flat_angles(inputs, params);
    let mut grads = [0.0; 14];
    for j in 0..14 {
        let mut plus = base;
        let mut minus = base;
        plus[j] += FRAC_PI_2;
        minus[j] -= FRAC_PI_2;
        let ep = run_flat(&plus);
        let em = run_flat(&minus);
        let mut g = 0.0;
        for k in 0..3 {
            g += upstream[k] * (ep[k] - em[k]) / 2.0;
        }
        grads[j] = g;
    }
    let mut input_grads = [0.0; 3];
    input_grads.copy_from_slice(&grads[..3]);
    let mut param_grads = [0.0; GROUP_PARAM_COUNT];
    param_grads.copy_from_slice(&grads[3..]);
    (input_grads, param_grads)
}

// ---------------------------------------------------------------------------
// gate matrices
// ---------------------------------------------------------------------------

pub fn ry_matrix(theta: f64) -> [[Complex64; 2]; 2] {
    let d = (theta / 2.0).cos();
    let g = (theta / 2.0).sin();
    let re = |x: f64| Complex64::new(x, 0.0);
    [[re(d), re(-g)], [re(g), re(d)]]
}

pub fn rx_matrix(theta: f64) -> [[Complex64; 2]; 2] {
    let d = Complex64::new((theta / 2.0).cos(), 0.0);
    let g = Complex64::new(0.0, -(theta / 2.0).sin());
    [[d, g], [g, d]]
}

pub fn not_matrix() -> [[Complex64; 2]; 2] {
    let o = Complex64::new(1.0, 0.0);
    let z = Complex64::new(0.0, 0.0);
    [[z, o], [o, z]]
}

pub fn pauli_z_matrix() -> [[Complex64; 2]; 2] {
    let o = Complex64::new(1.0, 0.0);
    let z = Complex64::new(0.0, 0.0);
    [[o, z], [z, -o]]
}

/// 4x4 Ising-XX matrix: cos(theta/2) on the diagonal, -i sin(theta/2) on the
/// anti-diagonal.
pub fn xx_matrix(theta: f64) -> [[Complex64; 4]; 4] {
    let d = Complex64::new((theta / 2.0).cos(), 0.0);
    let g = Complex64::new(0.0, -(theta / 2.0).sin());
    let z = Complex64::new(0.0, 0.0);
    [
        [d, z, z, g],
        [z, d, g, z],
        [z, g, d, z],
        [g, z, z, d],
    ]
}

/// 8x8 mixed-polarity Toffoli, block-diagonal DIAG(I4, X, I2) in the
/// |c1 c0 t> ordering: flips indices 4 and 5.
pub fn ccnot_matrix() -> [[Complex64; 8]; 8] {
    let o = Complex64::new(1.0, 0.0);
    let z = Complex64::new(0.0, 0.0);
    let mut m = [[z; 8]; 8];
    for (i, row) in m.iter_mut().enumerate() {
        let j = match i {
            4 => 5,
            5 => 4,
            _ => i,
        };
        row[j] = o;
    }
    m
}

// ---------------------------------------------------------------------------
// single-qubit Euler decomposition
// ---------------------------------------------------------------------------

pub type Matrix2 = [[Complex64; 2]; 2];

#[derive(Debug, Clone, Copy)]
pub struct EulerFit {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    /// Global phase factored out of the target before fitting.
    pub phase: f64,
    /// Max-abs entry of RY(alpha) RX(beta) RY(rho) - target * e^{-i phase}.
    pub residual: f64,
}

pub fn mat2_mul(a: &Matrix2, b: &Matrix2) -> Matrix2 {
    let z = Complex64::new(0.0, 0.0);
    let mut out = [[z; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat2_unitarity_defect(u: &Matrix2) -> f64 {
    // max-abs entry of U^dagger U - I
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let mut s = Complex64::new(0.0, 0.0);
            for row in u {
                s += row[i].conj() * row[j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((s - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// Recover angles with RY(alpha) RX(beta) RY(rho) = target up to a global
/// phase. Works for any 2x2 unitary; rejects non-unitary input.
pub fn euler_fit(target: &Matrix2) -> Result<EulerFit> {
    let defect = mat2_unitarity_defect(target);
    if defect > 1e-10 {
        return Err(Error::Validation(format!(
            "euler fit target is not unitary (defect {defect:.3e})"
        )));
    }
    let det = target[0][0] * target[1][1] - target[0][1] * target[1][0];
    let phase = det.arg() / 2.0;
    let unphase = Complex64::from_polar(1.0, -phase);
    let a = target[0][0] * unphase;
    let b = target[1][0] * unphase;

    // RY(alpha) RX(beta) RY(rho) = [[cb cos(phi) + i sb sin(psi), .],
    //                               [cb sin(phi) - i sb cos(psi), .]]
    // with cb = cos(beta/2), sb = sin(beta/2), phi = (alpha+rho)/2,
    // psi = (alpha-rho)/2; solve each factor from the real/imaginary parts.
    let cb = (a.re * a.re + b.re * b.re).sqrt();
    let sb = (a.im * a.im + b.im * b.im).sqrt();
    let beta = 2.0 * sb.atan2(cb);
    let phi = if cb > 1e-12 { b.re.atan2(a.re) } else { 0.0 };
    let psi = if sb > 1e-12 { a.im.atan2(-b.im) } else { 0.0 };
    let alpha = phi + psi;
    let rho = phi - psi;

    let fitted = mat2_mul(&ry_matrix(alpha), &mat2_mul(&rx_matrix(beta), &ry_matrix(rho)));
    let su2 = [[a, -b.conj()], [b, a.conj()]];
    let mut residual: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            residual = residual.max((fitted[i][j] - su2[i][j]).norm());
        }
    }
    Ok(EulerFit { alpha, beta, rho, phase, residual })
}
