//! Stochastic reconfiguration: `δθ = −η (S + ε𝟙)⁻¹ F`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, gemm};

/// Learning rates tabulated by density.
pub const LEARNING_RATE_TABLE: [(f64, f64); 8] = [
    (1.0, 0.05),
    (2.0, 0.05),
    (5.0, 0.05),
    (10.0, 0.1),
    (20.0, 0.1),
    (50.0, 0.5),
    (100.0, 1.0),
    (110.0, 2.5),
];

/// Tabulated learning rate for `r_s`; the second value is false when the
/// nearest tabulated density had to be used.
pub fn learning_rate_for(r_s: f64) -> (f64, bool) {
    let mut best = LEARNING_RATE_TABLE[0];
    for &(r, eta) in &LEARNING_RATE_TABLE {
        if (r - r_s).abs() < (best.0 - r_s).abs() {
            best = (r, eta);
        }
    }
    (best.1, (best.0 - r_s).abs() < 1e-12)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SrSolver {
    #[default]
    ConjugateGradient,
    /// Explicit matrix and Cholesky solve; only sensible for few parameters.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    /// Overrides the tabulated value when set.
    pub learning_rate: Option<f64>,
    pub diag_shift: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    pub solver: SrSolver,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            diag_shift: 1e-4,
            cg_tolerance: 1e-6,
            cg_max_iterations: 1000,
            solver: SrSolver::ConjugateGradient,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.learning_rate {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::Config("optimizer.learning_rate must be positive".into()));
            }
        }
        if !(self.diag_shift.is_finite() && self.diag_shift > 0.0) {
            return Err(Error::Config("optimizer.diag_shift must be positive".into()));
        }
        if !(self.cg_tolerance > 0.0) || self.cg_max_iterations == 0 {
            return Err(Error::Config("optimizer.cg_tolerance and optimizer.cg_max_iterations must be positive".into()));
        }
        Ok(())
    }

    /// Effective learning rate, logging when the table is extrapolated.
    pub fn learning_rate(&self, r_s: f64) -> f64 {
        if let Some(eta) = self.learning_rate {
            return eta;
        }
        let (eta, exact) = learning_rate_for(r_s);
        if !exact {
            log::warn!("no tabulated learning rate for r_s = {r_s}; using the nearest entry, η = {eta}");
        }
        eta
    }
}

/// Per-sample local energies and log-derivatives from one sample set,
/// optionally weighted.
#[derive(Clone, Debug, Default)]
pub struct EstimatorAccumulator {
    n_params: usize,
    energies: Vec<Complex64>,
    weights: Vec<f64>,
    o: Vec<Complex64>,
}

impl EstimatorAccumulator {
    pub fn new(n_params: usize) -> Self {
        Self {
            n_params,
            ..Default::default()
        }
    }

    pub fn push(&mut self, e_loc: Complex64, o: &[Complex64]) {
        self.push_weighted(e_loc, o, 1.0);
    }

    pub fn push_weighted(&mut self, e_loc: Complex64, o: &[Complex64], weight: f64) {
        assert_eq!(o.len(), self.n_params);
        self.energies.push(e_loc);
        self.weights.push(weight);
        self.o.extend_from_slice(o);
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn energies(&self) -> &[Complex64] {
        &self.energies
    }

    fn check(&self) -> Result<f64> {
        if self.len() < 2 {
            return Err(Error::InvalidState(format!("need at least 2 samples, have {}", self.len())));
        }
        let w: f64 = self.weights.iter().sum();
        if !(w > 0.0) {
            return Err(Error::InvalidState("total sample weight is zero".into()));
        }
        Ok(w)
    }

    pub fn mean_energy(&self) -> Result<Complex64> {
        let w = self.check()?;
        Ok(self.energies.iter().zip(&self.weights).map(|(e, &wt)| e * wt).sum::<Complex64>() / w)
    }

    fn mean_o(&self, w: f64) -> Vec<Complex64> {
        let p = self.n_params;
        let mut m = vec![Complex64::new(0.0, 0.0); p];
        for (s, &wt) in self.weights.iter().enumerate() {
            for (acc, o) in m.iter_mut().zip(&self.o[s * p..(s + 1) * p]) {
                *acc += o * wt;
            }
        }
        m.iter_mut().for_each(|v| *v /= w);
        m
    }
}

/// `F = 2 Re[⟨O* E⟩ − ⟨O*⟩⟨E⟩]`.
pub fn estimate_force(acc: &EstimatorAccumulator) -> Result<Vec<f64>> {
    let w = acc.check()?;
    let e_mean = acc.mean_energy()?;
    let p = acc.n_params;
    let mut f = vec![0.0; p];
    for (s, &wt) in acc.weights.iter().enumerate() {
        let de = (acc.energies[s] - e_mean) * wt;
        for (fk, o) in f.iter_mut().zip(&acc.o[s * p..(s + 1) * p]) {
            *fk += (o.conj() * de).re;
        }
    }
    f.iter_mut().for_each(|v| *v *= 2.0 / w);
    Ok(f)
}

/// Matrix-free `v ↦ S v` with `S = Re[⟨O* Oᵀ⟩ − ⟨O*⟩⟨Oᵀ⟩]`.
#[derive(Clone, Debug)]
pub struct QgtOperator {
    n_samples: usize,
    n_params: usize,
    /// Centred, weight-scaled real and imaginary parts, `samples × params`.
    re: Vec<f64>,
    im: Vec<f64>,
}

impl QgtOperator {
    pub fn new(acc: &EstimatorAccumulator) -> Result<Self> {
        let w = acc.check()?;
        let mean = acc.mean_o(w);
        let (n, p) = (acc.len(), acc.n_params);
        let mut re = vec![0.0; n * p];
        let mut im = vec![0.0; n * p];
        for s in 0..n {
            let scale = (acc.weights[s] / w).sqrt();
            for k in 0..p {
                let d = (acc.o[s * p + k] - mean[k]) * scale;
                re[s * p + k] = d.re;
                im[s * p + k] = d.im;
            }
        }
        Ok(Self {
            n_samples: n,
            n_params: p,
            re,
            im,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (n, p) = (self.n_samples, self.n_params);
        let mut a_re = vec![0.0; n];
        let mut a_im = vec![0.0; n];
        gemm(n, p, 1, &self.re, v, &mut a_re, false);
        gemm(n, p, 1, &self.im, v, &mut a_im, false);
        let mut out = vec![0.0; p];
        // out = reᵀ a_re + imᵀ a_im
        gemm(1, n, p, &a_re, &self.re, &mut out, false);
        gemm(1, n, p, &a_im, &self.im, &mut out, true);
        out
    }

    /// Explicit `P × P` matrix.
    pub fn dense(&self) -> Vec<f64> {
        let (n, p) = (self.n_samples, self.n_params);
        let mut s = vec![0.0; p * p];
        for part in [&self.re, &self.im] {
            unsafe {
                matrixmultiply::dgemm(p, n, p, 1.0, part.as_ptr(), 1, p as isize, part.as_ptr(), p as isize, 1, 1.0, s.as_mut_ptr(), p as isize, 1);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual `‖b − A x‖ / ‖b‖` of the returned iterate.
    pub residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient for `(S + shift·𝟙) x = b`. Returns the best iterate
/// seen when the tolerance is not reached.
pub fn conjugate_gradient(op: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], shift: f64, tol: f64, max_iter: usize) -> CgResult {
    let p = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; p];
    if bnorm == 0.0 {
        return CgResult {
            x,
            iterations: 0,
            residual: 0.0,
            converged: true,
            residual_history: vec![0.0],
        };
    }
    let mut r = b.to_vec();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut hist = vec![1.0];
    let mut best = (x.clone(), 1.0);
    let mut it = 0;
    while it < max_iter {
        let mut ad = op(&d);
        for (a, v) in ad.iter_mut().zip(&d) {
            *a += shift * v;
        }
        let dad = dot(&d, &ad);
        if !(dad > 0.0) {
            break;
        }
        let alpha = rr / dad;
        for k in 0..p {
            x[k] += alpha * d[k];
            r[k] -= alpha * ad[k];
        }
        it += 1;
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / bnorm;
        hist.push(rel);
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel < tol {
            break;
        }
        let beta = rr_new / rr;
        for k in 0..p {
            d[k] = r[k] + beta * d[k];
        }
        rr = rr_new;
    }
    let converged = best.1 < tol;
    CgResult {
        x: best.0,
        iterations: it,
        residual: best.1,
        converged,
        residual_history: hist,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrStep {
    pub params: Vec<f64>,
    pub direction: Vec<f64>,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_converged: bool,
}

/// Returns `θ − η (S + ε𝟙)⁻¹ F`. A non-finite solution aborts the step.
pub fn sr_update(params: &[f64], force: &[f64], qgt: &QgtOperator, cfg: &SrConfig, eta: f64) -> Result<SrStep> {
    if force.len() != params.len() || qgt.n_params() != params.len() {
        return Err(Error::InvalidInput("parameter, force and metric sizes differ".into()));
    }
    let (x, iterations, residual, converged) = match cfg.solver {
        SrSolver::ConjugateGradient => {
            let r = conjugate_gradient(|v| qgt.apply(v), force, cfg.diag_shift, cfg.cg_tolerance, cfg.cg_max_iterations);
            if !r.converged {
                log::warn!("SR conjugate gradient stopped at relative residual {:.3e} after {} iterations", r.residual, r.iterations);
            }
            (r.x, r.iterations, r.residual, r.converged)
        }
        SrSolver::Dense => {
            let p = params.len();
            let mut s = qgt.dense();
            for k in 0..p {
                s[k * p + k] += cfg.diag_shift;
            }
            (cholesky_solve(&s, p, force)?, 0, 0.0, true)
        }
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SR solve produced non-finite values".into()));
    }
    let new: Vec<f64> = params.iter().zip(&x).map(|(t, d)| t - eta * d).collect();
    Ok(SrStep {
        params: new,
        direction: x,
        cg_iterations: iterations,
        cg_residual: residual,
        cg_converged: converged,
    })
}
