//! Shared fixtures for the integration suites: a deterministic synthetic
//! climate dataset whose target is a fixed smooth function of the window.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub const CENTER_LAT: f64 = -30.25;
pub const CENTER_LON: f64 = 150.25;

const MONTHS_PER_WINDOW: usize = 15;
const VARS: usize = 7;
/// Teacher taps: (window row, variable, weight). Variable 0 is
/// precipitation, variable 3 is mean temperature; row 14 is the most
/// recent month of the window.
const TEACHER_TAPS: [(usize, usize, f64); 5] =
    [(14, 0, 0.6), (12, 0, -0.45), (9, 0, 0.35), (14, 3, 0.4), (11, 3, -0.3)];
pub const TEACHER_NOISE_SIGMA: f64 = 0.05;

/// Per-variable climatology: (mean, seasonal amplitude, phase, shared AR
/// innovation scale, per-cell noise scale).
const CLIMATE: [(f64, f64, f64, f64, f64); VARS] = [
    (80.0, 45.0, 0.0, 18.0, 4.0),  // pre
    (26.0, 8.0, 1.1, 1.6, 0.35),   // tmx
    (12.0, 7.0, 1.1, 1.4, 0.3),    // tmn
    (19.0, 7.5, 1.1, 1.5, 0.3),    // tmp
    (14.0, 5.0, 0.7, 1.2, 0.3),    // vap
    (48.0, 14.0, 2.3, 5.0, 1.2),   // cld
    (95.0, 55.0, 1.2, 9.0, 2.5),   // pet
];

pub struct SynthDataset {
    pub csv: String,
    pub months: usize,
    /// Targets indexed by month offset (entries before the first full
    /// window are None).
    pub targets: Vec<Option<f64>>,
}

/// Generate `years` of monthly data for the 3x3 neighborhood. The center
/// cell's SPEI-1 target is `3 tanh(u) + noise` where `u` is a sparse
/// weighted sum over the standardized precipitation and mean-temperature
/// lags of the preceding 15-month window, standardized exactly the way the
/// ingestion pipeline standardizes windows.
pub fn generate(start_year: i32, years: usize, seed: u64) -> SynthDataset {
    let months = years * 12;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // shared AR(1) field per variable, common to all cells
    let mut shared = vec![vec![0.0f64; months]; VARS];
    for (v, series) in shared.iter_mut().enumerate() {
        let sigma = CLIMATE[v].3;
        let mut state = 0.0;
        for slot in series.iter_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            state = 0.72 * state + sigma * eps;
            *slot = state;
        }
    }

    // values[cell][month][var]; cell index r*3+c with the center at 4
    let mut values = vec![vec![[0.0f64; VARS]; months]; 9];
    for (cell, rows) in values.iter_mut().enumerate() {
        let (r, c) = (cell / 3, cell % 3);
        for (m, row) in rows.iter_mut().enumerate() {
            for (v, slot) in row.iter_mut().enumerate() {
                let (mu, amp, phase, _, cell_sigma) = CLIMATE[v];
                let season = amp * (2.0 * std::f64::consts::PI * (m % 12) as f64 / 12.0 + phase).sin();
                let gradient = 0.8 * (r as f64 - 1.0) + 0.5 * (c as f64 - 1.0);
                let noise: f64 = rng.sample(StandardNormal);
                *slot = mu + season + shared[v][m] + gradient + cell_sigma * noise;
            }
        }
    }

    // teacher targets from the standardized center window
    let mut targets: Vec<Option<f64>> = vec![None; months];
    for t in MONTHS_PER_WINDOW..months {
        let window = &values[4][t - MONTHS_PER_WINDOW..t];
        let mut mean = [0.0; VARS];
        let mut std = [0.0; VARS];
        for v in 0..VARS {
            let mu: f64 = window.iter().map(|row| row[v]).sum::<f64>() / MONTHS_PER_WINDOW as f64;
            let var: f64 = window.iter().map(|row| (row[v] - mu).powi(2)).sum::<f64>()
                / MONTHS_PER_WINDOW as f64;
            mean[v] = mu;
            let sigma = var.sqrt();
            std[v] = if sigma < 1e-8 { 1.0 } else { sigma };
        }
        let mut u = 0.0;
        for (row, var, weight) in TEACHER_TAPS {
            u += weight * (window[row][var] - mean[var]) / std[var];
        }
        let noise: f64 = rng.sample(StandardNormal);
        let spei = (3.0 * u.tanh() + TEACHER_NOISE_SIGMA * noise).clamp(-3.0, 3.0);
        targets[t] = Some(spei);
    }

    // render the table: one row per cell-month, center SPEI only
    let mut csv = String::from("date,lat,lon,pre,tmx,tmn,tmp,vap,cld,pet,spei1\n");
    for (cell, rows) in values.iter().enumerate() {
        let (r, c) = (cell / 3, cell % 3);
        let lat = CENTER_LAT - (r as f64 - 1.0) * 0.5;
        let lon = CENTER_LON + (c as f64 - 1.0) * 0.5;
        for (m, row) in rows.iter().enumerate() {
            let year = start_year + (m / 12) as i32;
            let month = m % 12 + 1;
            write!(csv, "{year:04}-{month:02},{lat},{lon}").unwrap();
            for v in row {
                write!(csv, ",{v}").unwrap();
            }
            match (cell, targets[m]) {
                (4, Some(s)) => writeln!(csv, ",{s}").unwrap(),
                _ => csv.push_str(",NA\n"),
            }
        }
    }
    SynthDataset { csv, months, targets }
}

pub fn write_dataset(path: &Path, data: &SynthDataset) {
    std::fs::write(path, &data.csv).expect("fixture write");
}

// ---------------------------------------------------------------------------
// oracles shared by the verification suites
// ---------------------------------------------------------------------------

use num_complex::Complex64;

/// Values of one selective-scan parameter set, for the plain-loop oracle.
pub struct ScanParams {
    pub w_delta: Vec<f64>, // [k, k]
    pub b_delta: Vec<f64>, // [k]
    pub w_b: Vec<f64>,     // [k, n]
    pub b_b: Vec<f64>,     // [n]
    pub w_c: Vec<f64>,     // [k, n]
    pub b_c: Vec<f64>,     // [n]
    pub a: Vec<f64>,       // [k, n]
    pub d: Vec<f64>,       // [k]
    pub k: usize,
    pub n: usize,
}

impl ScanParams {
    pub fn random(rng: &mut ChaCha12Rng, k: usize, n: usize) -> Self {
        let mut v = |len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(lo..hi)).collect()
        };
        ScanParams {
            w_delta: v(k * k, -0.4, 0.4),
            b_delta: v(k, -2.5, 0.5),
            w_b: v(k * n, -0.4, 0.4),
            b_b: v(n, -0.4, 0.4),
            w_c: v(k * n, -0.4, 0.4),
            b_c: v(n, -0.4, 0.4),
            a: v(k * n, -2.0, -0.1),
            d: v(k, -1.0, 1.0),
            k,
            n,
        }
    }
}

/// Naive per-step recursion: input-dependent discretization, diagonal state
/// update, skip connection. Independent of the tape implementation.
pub fn naive_scan(x: &[f64], len: usize, p: &ScanParams) -> Vec<f64> {
    let (k, n) = (p.k, p.n);
    assert_eq!(x.len(), len * k);
    let softplus = |v: f64| (1.0 + v.exp()).ln();
    let mut h = vec![0.0; k * n];
    let mut y = vec![0.0; len * k];
    for i in 0..len {
        let xi = &x[i * k..(i + 1) * k];
        let mut delta = vec![0.0; k];
        for c in 0..k {
            let mut acc = p.b_delta[c];
            for (j, &xj) in xi.iter().enumerate() {
                acc += xj * p.w_delta[j * k + c];
            }
            delta[c] = softplus(acc);
        }
        let mut b_i = vec![0.0; n];
        let mut c_i = vec![0.0; n];
        for s in 0..n {
            let mut ab = p.b_b[s];
            let mut ac = p.b_c[s];
            for (j, &xj) in xi.iter().enumerate() {
                ab += xj * p.w_b[j * n + s];
                ac += xj * p.w_c[j * n + s];
            }
            b_i[s] = ab;
            c_i[s] = ac;
        }
        for c in 0..k {
            let mut out = p.d[c] * xi[c];
            for s in 0..n {
                let abar = (delta[c] * p.a[c * n + s]).exp();
                h[c * n + s] = abar * h[c * n + s] + delta[c] * b_i[s] * xi[c];
                out += c_i[s] * h[c * n + s];
            }
            y[i * k + c] = out;
        }
    }
    y
}

/// Random 2x2 unitary from QR (Gram-Schmidt) of a complex Gaussian matrix.
pub fn random_unitary(rng: &mut ChaCha12Rng) -> [[Complex64; 2]; 2] {
    let mut g = || -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    };
    let a = [g(), g()];
    let b = [g(), g()];
    let norm_a = (a[0].norm_sqr() + a[1].norm_sqr()).sqrt();
    let q1 = [a[0] / norm_a, a[1] / norm_a];
    let proj = q1[0].conj() * b[0] + q1[1].conj() * b[1];
    let r = [b[0] - proj * q1[0], b[1] - proj * q1[1]];
    let norm_r = (r[0].norm_sqr() + r[1].norm_sqr()).sqrt();
    let q2 = [r[0] / norm_r, r[1] / norm_r];
    // columns are the orthonormal basis
    [[q1[0], q2[0]], [q1[1], q2[1]]]
}
