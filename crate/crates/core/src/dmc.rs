//! Fixed-node diffusion Monte Carlo with a Slater-Jastrow trial state.
//!
//! Walkers move with the free propagator and carry importance-sampled
//! weights from two mirror displacements `X ± δX`. The fixed-node rule uses
//! the real part of the amplitude ratio.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{ParticleConfiguration, SimulationCell, Spin};
use crate::error::{Error, Result};
use crate::ewald::EwaldContext;
use crate::linalg::{CMatrix, ComplexLu};
use crate::orbitals::{OrbitalSet, HESS_PAIRS};
use crate::sampler::{default_step_size, MoveKind, WalkerEnsemble};
use crate::sr::SrConfig;
use crate::stats::{blocking, BlockingResult};
use crate::vmc::{sample, sr_iteration};
use crate::wavefunction::{potential, DerivativeBundle, LogAmplitude, Wavefunction};

pub const DEFAULT_JASTROW_TERMS: usize = 6;

/// `j(x) = |x|[1 − 2(|x|/L)³]`.
pub fn jastrow_kernel(x: f64, l: f64) -> f64 {
    let a = x.abs() / l;
    x.abs() * (1.0 - 2.0 * a * a * a)
}

/// `(j, j', j'')` for `x` in `[-L/2, L/2]`.
fn kernel_jet(x: f64, l: f64) -> (f64, f64, f64) {
    let l3 = l * l * l;
    let ax = x.abs();
    let s = x.signum();
    (ax - 2.0 * ax.powi(4) / l3, s * (1.0 - 8.0 * ax.powi(3) / l3), -24.0 * x * x / l3)
}

/// `exp(J) · det S_↑ · det S_↓` with a pair Jastrow
/// `J = Σ_{i<j} Σ_n c_{n,στ} u_ij^n`, `u² = j(x)² + j(y)² + j(z)²`.
///
/// The `n = 1` coefficients impose the electron-electron cusp and stay
/// fixed; in scaled units they are `r_s/4` for parallel and `r_s/2` for
/// antiparallel spins. The free coefficients `n ≥ 2` are the parameters,
/// ordered parallel channel first.
#[derive(Clone, Debug)]
pub struct SlaterJastrow {
    cell: SimulationCell,
    orbitals: OrbitalSet,
    n_terms: usize,
    cusp: [f64; 2],
    coeffs: Vec<f64>,
}

const PARALLEL: usize = 0;
const ANTIPARALLEL: usize = 1;

impl SlaterJastrow {
    pub fn new(cell: &SimulationCell, orbitals: OrbitalSet, n_terms: usize) -> Result<Self> {
        if n_terms == 0 {
            return Err(Error::InvalidInput("the Jastrow needs at least the cusp term".into()));
        }
        if orbitals.orbitals(Spin::Up).len() != cell.n_up() || orbitals.orbitals(Spin::Down).len() != cell.n_down() {
            return Err(Error::InvalidInput("orbital set does not match the cell's spin populations".into()));
        }
        let r_s = cell.r_s();
        Ok(Self {
            cell: cell.clone(),
            orbitals,
            n_terms,
            cusp: [r_s / 4.0, r_s / 2.0],
            coeffs: vec![0.0; 2 * (n_terms - 1)],
        })
    }

    /// Bare determinant: no Jastrow at all.
    pub fn slater_only(cell: &SimulationCell, orbitals: OrbitalSet) -> Result<Self> {
        let mut s = Self::new(cell, orbitals, 1)?;
        s.cusp = [0.0, 0.0];
        Ok(s)
    }

    /// `[parallel, antiparallel]` cusp coefficients.
    pub fn cusp_coefficients(&self) -> [f64; 2] {
        self.cusp
    }

    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn orbitals(&self) -> &OrbitalSet {
        &self.orbitals
    }

    fn coefficient(&self, channel: usize, n: usize) -> f64 {
        if n == 1 {
            self.cusp[channel]
        } else {
            self.coeffs[channel * (self.n_terms - 1) + n - 2]
        }
    }

    /// Pair Jastrow `J(X)`.
    pub fn jastrow(&self, config: &ParticleConfiguration) -> f64 {
        self.jastrow_terms(config, None, None)
    }

    /// Evaluates `J`; optionally accumulates `∇J`, `ΔJ` (in `grad_lap`) and
    /// `∂J/∂c` (in `params`).
    fn jastrow_terms(&self, config: &ParticleConfiguration, mut grad_lap: Option<(&mut [[f64; 3]], &mut f64)>, mut params: Option<&mut [f64]>) -> f64 {
        let l = self.cell.side();
        let n = config.n_particles();
        let spins = config.spins();
        let mut total = 0.0;
        for i in 0..n {
            for k in i + 1..n {
                let ch = if spins[i] == spins[k] { PARALLEL } else { ANTIPARALLEL };
                let d = config.displacement(i, k, &self.cell);
                let jets = [kernel_jet(d[0], l), kernel_jet(d[1], l), kernel_jet(d[2], l)];
                let u2: f64 = jets.iter().map(|j| j.0 * j.0).sum();
                let u = u2.sqrt();
                let (mut f, mut f1, mut f2) = (0.0, 0.0, 0.0);
                let mut un = 1.0; // u^(m-1)
                for m in 1..=self.n_terms {
                    let c = self.coefficient(ch, m);
                    let mf = m as f64;
                    // f'' uses u^(m-2); for m = 1 the term vanishes
                    if m >= 2 {
                        f2 += c * mf * (mf - 1.0) * un / u;
                    }
                    f1 += c * mf * un;
                    un *= u;
                    f += c * un;
                    if m >= 2 {
                        if let Some(p) = params.as_deref_mut() {
                            p[ch * (self.n_terms - 1) + m - 2] += un;
                        }
                    }
                }
                total += f;
                if let Some((g, lap)) = grad_lap.as_mut() {
                    if u == 0.0 {
                        continue;
                    }
                    let mut ld = 0.0;
                    for a in 0..3 {
                        let (j, j1, j2) = jets[a];
                        let du = j * j1 / u;
                        let d2u = (j1 * j1 + j * j2) / u - du * du / u;
                        let ga = f1 * du;
                        g[i][a] += ga;
                        g[k][a] -= ga;
                        ld += f2 * du * du + f1 * d2u;
                    }
                    **lap += 2.0 * ld;
                }
            }
        }
        total
    }

    /// Slater part: `log det` summed over spins and, when requested,
    /// `∇ log det` and `Δ log det`.
    fn slater(&self, config: &ParticleConfiguration, derivs: bool) -> Result<(Complex64, Vec<[Complex64; 3]>, Complex64)> {
        let n = config.n_particles();
        if n != self.cell.n_particles() {
            return Err(Error::InvalidInput(format!("configuration has {n} particles, cell has {}", self.cell.n_particles())));
        }
        let spins = config.spins();
        let zero = Complex64::new(0.0, 0.0);
        let mut log_det = zero;
        let mut grad = vec![[zero; 3]; if derivs { n } else { 0 }];
        let mut lap = zero;
        for spin in [Spin::Up, Spin::Down] {
            let rows: Vec<usize> = (0..n).filter(|&i| spins[i] == spin).collect();
            let orbs = self.orbitals.orbitals(spin);
            if rows.len() != orbs.len() {
                return Err(Error::InvalidInput("configuration spins do not match the cell".into()));
            }
            let m = rows.len();
            if m == 0 {
                continue;
            }
            let mut phi = CMatrix::zeros(m);
            let mut jets = Vec::with_capacity(if derivs { m * m } else { 0 });
            for (r, &p) in rows.iter().enumerate() {
                let x = config.position(p);
                let y = [Complex64::new(x[0], 0.0), Complex64::new(x[1], 0.0), Complex64::new(x[2], 0.0)];
                for (c, o) in orbs.iter().enumerate() {
                    if derivs {
                        let jt = self.orbitals.jet(o, y);
                        phi.set(r, c, jt.value);
                        jets.push(jt);
                    } else {
                        phi.set(r, c, self.orbitals.value(o, y));
                    }
                }
            }
            let lu = ComplexLu::factor(&phi)?;
            log_det += Complex64::new(lu.log_abs_det(), lu.phase());
            if !derivs {
                continue;
            }
            let inv = lu.inverse();
            // each particle touches a single row, so
            // Δ log det = Σ_r (Φ⁻¹ ΔΦ)_rr − Σ_{r,a} (∂_{r,a} log det)²
            for (r, &p) in rows.iter().enumerate() {
                let mut g = [zero; 3];
                for c in 0..m {
                    let w = inv.get(c, r);
                    let jt = &jets[r * m + c];
                    for a in 0..3 {
                        g[a] += w * jt.grad[a];
                    }
                    let mut d2 = zero;
                    for (slot, &(a, b)) in HESS_PAIRS.iter().enumerate() {
                        if a == b {
                            d2 += jt.hess[slot];
                        }
                    }
                    lap += w * d2;
                }
                for a in 0..3 {
                    lap -= g[a] * g[a];
                }
                grad[p] = g;
            }
        }
        Ok((log_det, grad, lap))
    }
}

impl Wavefunction for SlaterJastrow {
    fn cell(&self) -> &SimulationCell {
        &self.cell
    }

    fn log_psi(&self, config: &ParticleConfiguration) -> Result<LogAmplitude> {
        let (ld, _, _) = self.slater(config, false)?;
        Ok(LogAmplitude::from_complex(ld + self.jastrow(config)))
    }

    fn coordinate_derivatives(&self, config: &ParticleConfiguration) -> Result<DerivativeBundle> {
        let (ld, mut grad, mut lap) = self.slater(config, true)?;
        let n = config.n_particles();
        let mut jg = vec![[0.0; 3]; n];
        let mut jl = 0.0;
        let j = self.jastrow_terms(config, Some((&mut jg, &mut jl)), None);
        for (g, h) in grad.iter_mut().zip(&jg) {
            for a in 0..3 {
                g[a] += h[a];
            }
        }
        lap += jl;
        Ok(DerivativeBundle {
            log_psi: LogAmplitude::from_complex(ld + j),
            grad_log: grad,
            laplacian_log: lap,
            param_log_derivs: Vec::new(),
        })
    }

    fn param_log_derivs(&self, config: &ParticleConfiguration) -> Result<Vec<Complex64>> {
        let mut p = vec![0.0; self.coeffs.len()];
        self.jastrow_terms(config, None, Some(&mut p));
        Ok(p.into_iter().map(|v| Complex64::new(v, 0.0)).collect())
    }

    fn params(&self) -> &[f64] {
        &self.coeffs
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.coeffs.len() {
            return Err(Error::InvalidInput(format!("expected {} Jastrow coefficients, got {}", self.coeffs.len(), params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite Jastrow coefficient".into()));
        }
        self.coeffs.copy_from_slice(params);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmcConfig {
    pub n_walkers: usize,
    /// Imaginary-time step; defaults to `0.01 r_s²`.
    pub time_step: Option<f64>,
    pub equilibration_steps: usize,
    pub production_steps: usize,
    /// Number of Jastrow terms per spin channel, cusp term included.
    pub jastrow_terms: usize,
    pub jastrow_optimization_steps: usize,
    pub jastrow_learning_rate: f64,
    /// Growth estimates averaged into the trial energy.
    pub trial_energy_window: usize,
}

impl Default for DmcConfig {
    fn default() -> Self {
        Self {
            n_walkers: 1000,
            time_step: None,
            equilibration_steps: 500,
            production_steps: 2000,
            jastrow_terms: DEFAULT_JASTROW_TERMS,
            jastrow_optimization_steps: 200,
            jastrow_learning_rate: 0.1,
            trial_energy_window: 100,
        }
    }
}

impl DmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_walkers < 2 {
            return Err(Error::Config("dmc.n_walkers must be at least 2".into()));
        }
        if let Some(t) = self.time_step {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config("dmc.time_step must be positive".into()));
            }
        }
        if self.jastrow_terms == 0 {
            return Err(Error::Config("dmc.jastrow_terms must be at least 1".into()));
        }
        if !(self.jastrow_learning_rate.is_finite() && self.jastrow_learning_rate > 0.0) {
            return Err(Error::Config("dmc.jastrow_learning_rate must be positive".into()));
        }
        if self.trial_energy_window == 0 {
            return Err(Error::Config("dmc.trial_energy_window must be positive".into()));
        }
        Ok(())
    }

    pub fn time_step(&self, r_s: f64) -> f64 {
        self.time_step.unwrap_or(0.01 * r_s * r_s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmcWalker {
    pub config: ParticleConfiguration,
    pub weight: f64,
    pub log_psi: LogAmplitude,
    pub potential: f64,
    /// Real part of the local energy of the trial state.
    pub local_energy: f64,
}

impl DmcWalker {
    pub fn new<W: Wavefunction + ?Sized>(trial: &W, config: ParticleConfiguration, ewald: Option<&EwaldContext>) -> Result<Self> {
        let b = trial.coordinate_derivatives(&config)?;
        let v = potential(&config, trial.cell(), ewald)?;
        Ok(Self {
            local_energy: (b.kinetic_energy(trial.cell().r_s()) + v).re,
            log_psi: b.log_psi,
            potential: v,
            config,
            weight: 1.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmcPopulation {
    pub walkers: Vec<DmcWalker>,
    pub target_size: usize,
    /// Energy offset `E_T` in the weight factor `exp(E_T δτ)`.
    pub trial_energy: f64,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl DmcPopulation {
    pub fn new<W: Wavefunction + ?Sized>(trial: &W, configs: Vec<ParticleConfiguration>, ewald: Option<&EwaldContext>, seed: u64) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::InvalidInput("DMC needs at least one walker".into()));
        }
        let walkers = configs
            .into_par_iter()
            .map(|c| DmcWalker::new(trial, c, ewald))
            .collect::<Result<Vec<_>>>()?;
        let trial_energy = walkers.iter().map(|w| w.local_energy).sum::<f64>() / walkers.len() as f64;
        Ok(Self {
            target_size: walkers.len(),
            walkers,
            trial_energy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }
}

/// Diagnostics of one step, energies per particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmcStepReport {
    pub step: usize,
    pub growth_energy: f64,
    pub mixed_energy: f64,
    pub population: usize,
    pub mean_weight: f64,
    pub trial_energy: f64,
    /// Walkers whose both mirror weights vanished.
    pub killed: usize,
}

/// Free-propagator displacement: independent normals of variance `δτ/r_s²`.
pub fn free_displacement<R: Rng + ?Sized>(rng: &mut R, n: usize, tau: f64, r_s: f64) -> Vec<[f64; 3]> {
    let sigma = tau.sqrt() / r_s;
    (0..n)
        .map(|_| {
            [
                sigma * rng.sample::<f64, _>(StandardNormal),
                sigma * rng.sample::<f64, _>(StandardNormal),
                sigma * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect()
}

/// `Re[Ψ(X')/Ψ(X)] · exp(−[V(X') + V(X)] δτ/2)` and the new state, or zero
/// when `X'` cannot be evaluated.
fn mirror_weight<W: Wavefunction + ?Sized>(
    trial: &W,
    w: &DmcWalker,
    config: ParticleConfiguration,
    tau: f64,
    ewald: Option<&EwaldContext>,
) -> Result<(f64, ParticleConfiguration, LogAmplitude, f64)> {
    let lp = match trial.log_psi(&config) {
        Ok(lp) => lp,
        Err(Error::Singular(_)) | Err(Error::Divergence(..)) => return Ok((0.0, config, w.log_psi, f64::NAN)),
        Err(e) => return Err(e),
    };
    let v = match potential(&config, trial.cell(), ewald) {
        Ok(v) => v,
        Err(Error::Divergence(..)) => return Ok((0.0, config, lp, f64::NAN)),
        Err(e) => return Err(e),
    };
    let ratio = lp.log_ratio(&w.log_psi).exp().re;
    let weight = ratio * (-(v + w.potential) * 0.5 * tau).exp();
    Ok((if weight.is_finite() { weight } else { 0.0 }, config, lp, v))
}

/// Propagates one walker; returns its single-step weight factor.
fn propagate<W: Wavefunction + ?Sized>(trial: &W, w: &mut DmcWalker, tau: f64, ewald: Option<&EwaldContext>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cell = trial.cell();
    let n = w.config.n_particles();
    let dx = free_displacement(rng, n, tau, cell.r_s());
    let mut plus = w.config.clone();
    let mut minus = w.config.clone();
    for i in 0..n {
        let r = w.config.position(i);
        plus.set_position(i, [r[0] + dx[i][0], r[1] + dx[i][1], r[2] + dx[i][2]], cell);
        minus.set_position(i, [r[0] - dx[i][0], r[1] - dx[i][1], r[2] - dx[i][2]], cell);
    }
    let p = mirror_weight(trial, w, plus, tau, ewald)?;
    let m = mirror_weight(trial, w, minus, tau, ewald)?;
    // the average uses the signed weights; negative ones are zeroed afterwards
    let avg = 0.5 * (p.0 + m.0);
    let (wp, wm) = (p.0.max(0.0), m.0.max(0.0));
    if !(avg > 0.0) || wp + wm == 0.0 {
        return Ok(0.0);
    }
    let u: f64 = rng.gen();
    let (_, config, log_psi, v) = if u * (wp + wm) < wp { p } else { m };
    let b = match trial.coordinate_derivatives(&config) {
        Ok(b) => b,
        Err(Error::Singular(_)) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    w.local_energy = (b.kinetic_energy(cell.r_s()) + v).re;
    w.config = config;
    w.log_psi = log_psi;
    w.potential = v;
    Ok(avg)
}

/// Systematic resampling to `target` walkers in proportion to weight; all
/// weights are reset to one.
fn resample(walkers: &[DmcWalker], target: usize, rng: &mut ChaCha8Rng) -> Vec<DmcWalker> {
    let total: f64 = walkers.iter().map(|w| w.weight).sum();
    let step = total / target as f64;
    let mut pos = rng.gen::<f64>() * step;
    let mut out = Vec::with_capacity(target);
    let mut cum = 0.0;
    for w in walkers {
        cum += w.weight;
        while pos < cum && out.len() < target {
            let mut c = w.clone();
            c.weight = 1.0;
            out.push(c);
            pos += step;
        }
    }
    // rounding can leave the last slots unfilled
    while out.len() < target {
        let mut c = walkers.iter().rev().find(|w| w.weight > 0.0).unwrap().clone();
        c.weight = 1.0;
        out.push(c);
    }
    out
}

/// One imaginary-time step of the whole population followed by population
/// control. Does not update `E_T`.
pub fn dmc_step<W: Wavefunction + ?Sized>(pop: &mut DmcPopulation, trial: &W, tau: f64, ewald: Option<&EwaldContext>) -> Result<DmcStepReport> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidInput("time step must be positive".into()));
    }
    let seeds: Vec<u64> = (0..pop.walkers.len()).map(|_| pop.rng.gen()).collect();
    let factors: Vec<f64> = pop
        .walkers
        .par_iter_mut()
        .zip(seeds)
        .map(|(w, s)| propagate(trial, w, tau, ewald, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<_>>()?;
    let old_total: f64 = pop.walkers.iter().map(|w| w.weight).sum();
    let growth = pop.walkers.iter().zip(&factors).map(|(w, f)| w.weight * f).sum::<f64>() / old_total;
    let boost = (pop.trial_energy * tau).exp();
    let mut killed = 0;
    for (w, &f) in pop.walkers.iter_mut().zip(&factors) {
        if f == 0.0 {
            killed += 1;
        }
        w.weight *= f * boost;
    }
    let total: f64 = pop.walkers.iter().map(|w| w.weight).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidState(format!("walker population died out at step {}", pop.step)));
    }
    let mixed = pop.walkers.iter().map(|w| w.weight * w.local_energy).sum::<f64>() / total;
    let n = trial.cell().n_particles() as f64;
    let report = DmcStepReport {
        step: pop.step,
        growth_energy: -growth.ln() / tau / n,
        mixed_energy: mixed / n,
        population: pop.walkers.len(),
        mean_weight: total / pop.walkers.len() as f64,
        trial_energy: pop.trial_energy / n,
        killed,
    };
    pop.walkers = resample(&pop.walkers, pop.target_size, &mut pop.rng);
    pop.step += 1;
    Ok(report)
}

/// Final estimates per particle with blocking errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmcEstimate {
    pub mixed: BlockingResult,
    pub growth: BlockingResult,
    pub time_step: f64,
    pub steps: usize,
}

/// Equilibration then production; `on_step` sees every report and whether
/// it belongs to production.
pub fn run_dmc<W: Wavefunction + ?Sized>(
    pop: &mut DmcPopulation,
    trial: &W,
    cfg: &DmcConfig,
    ewald: Option<&EwaldContext>,
    mut on_step: impl FnMut(&DmcStepReport, bool),
) -> Result<DmcEstimate> {
    let tau = cfg.time_step(trial.cell().r_s());
    let n = trial.cell().n_particles() as f64;
    let mut window: Vec<f64> = Vec::new();
    let mut mixed = Vec::with_capacity(cfg.production_steps);
    let mut growth = Vec::with_capacity(cfg.production_steps);
    for k in 0..cfg.equilibration_steps + cfg.production_steps {
        let production = k >= cfg.equilibration_steps;
        let rep = dmc_step(pop, trial, tau, ewald)?;
        window.push(rep.growth_energy * n);
        if window.len() > cfg.trial_energy_window {
            window.remove(0);
        }
        pop.trial_energy = window.iter().sum::<f64>() / window.len() as f64;
        if production {
            mixed.push(rep.mixed_energy);
            growth.push(rep.growth_energy);
        }
        on_step(&rep, production);
    }
    Ok(DmcEstimate {
        mixed: blocking(&mixed),
        growth: blocking(&growth),
        time_step: tau,
        steps: cfg.production_steps,
    })
}

/// Draws `n` configurations from `|Ψ_T|²` by Metropolis sampling.
pub fn initial_configurations<W: Wavefunction + ?Sized>(trial: &W, n: usize, seed: u64, burn_in: usize) -> Result<Vec<ParticleConfiguration>> {
    let mut ens = WalkerEnsemble::new(trial, n, seed, default_step_size(trial.cell()), MoveKind::SingleParticle)?;
    ens.burn_in(trial, burn_in, 0.5)?;
    Ok(ens.configs().cloned().collect())
}

/// Energies per particle before and after optimizing the Jastrow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JastrowOptimization {
    pub baseline: (f64, f64),
    pub optimized: (f64, f64),
    pub coefficients: Vec<f64>,
    pub steps: usize,
    pub reverted: bool,
}

fn energy_estimate<W: Wavefunction + ?Sized>(trial: &W, ens: &mut WalkerEnsemble, ewald: Option<&EwaldContext>, blocks: usize) -> Result<(f64, f64)> {
    let n = trial.cell().n_particles() as f64;
    let mut e = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        e.push(sample(trial, ens, ewald, 1, false)?.energy().0 / n);
    }
    let r = blocking(&e);
    Ok((r.mean, r.error))
}

/// Minimizes the VMC energy over the free Jastrow coefficients with SR.
/// The cusp coefficients are untouched. On a failed step the best
/// coefficients seen so far are restored and optimization stops.
pub fn optimize_jastrow(
    trial: &mut SlaterJastrow,
    ensemble: &mut WalkerEnsemble,
    ewald: Option<&EwaldContext>,
    sr: &SrConfig,
    eta: f64,
    steps: usize,
    estimate_blocks: usize,
) -> Result<JastrowOptimization> {
    let baseline = energy_estimate(&*trial, ensemble, ewald, estimate_blocks)?;
    let mut best = (f64::INFINITY, trial.params().to_vec());
    let mut reverted = false;
    let mut done = 0;
    for it in 0..steps {
        let before = trial.params().to_vec();
        match sr_iteration(trial, ensemble, ewald, sr, eta, 1, it) {
            Ok(rep) => {
                if rep.energy < best.0 {
                    best = (rep.energy, before);
                }
                done += 1;
            }
            Err(e @ (Error::Numerical(_) | Error::InvalidState(_) | Error::InvalidInput(_) | Error::Singular(_))) => {
                log::warn!("Jastrow optimization step {it} failed ({e}); restoring best coefficients");
                trial.set_params(&best.1)?;
                ensemble.refresh(&*trial)?;
                reverted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let optimized = energy_estimate(&*trial, ensemble, ewald, estimate_blocks)?;
    Ok(JastrowOptimization {
        baseline,
        optimized,
        coefficients: trial.params().to_vec(),
        steps: done,
        reverted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn trial(n_up: usize, n_down: usize, r_s: f64, seed: u64) -> SlaterJastrow {
        let cell = SimulationCell::new(n_up, n_down, r_s).unwrap();
        let mut t = SlaterJastrow::new(&cell, OrbitalSet::plane_waves(&cell, [0, 0, 0]), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..t.n_params()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        t.set_params(&c).unwrap();
        t
    }

    fn random_config(t: &SlaterJastrow, seed: u64) -> ParticleConfiguration {
        ParticleConfiguration::random(t.cell(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kernel_values() {
        let l = 3.7;
        assert_eq!(jastrow_kernel(0.0, l), 0.0);
        assert!((jastrow_kernel(l / 2.0, l) - 3.0 * l / 8.0).abs() < 1e-15);
        for x in [0.1, 0.9, 1.5] {
            assert_eq!(jastrow_kernel(x, l), jastrow_kernel(-x, l));
            let (j, j1, j2) = kernel_jet(x, l);
            let h = 1e-5;
            assert_eq!(j, jastrow_kernel(x, l));
            assert!((j1 - (jastrow_kernel(x + h, l) - jastrow_kernel(x - h, l)) / (2.0 * h)).abs() < 1e-8);
            assert!((j2 - (kernel_jet(x + h, l).1 - kernel_jet(x - h, l).1) / (2.0 * h)).abs() < 1e-7);
        }
        // smooth at the cell edge
        assert!(kernel_jet(l / 2.0, l).1.abs() < 1e-15);
    }

    #[test]
    fn cusp_coefficients_follow_density() {
        let t = trial(2, 2, 5.0, 0);
        assert_eq!(t.cusp_coefficients(), [1.25, 2.5]);
        assert_eq!(t.n_params(), 6);
    }

    #[test]
    fn coordinate_derivatives_match_finite_differences() {
        let t = trial(3, 2, 1.5, 1);
        let c = random_config(&t, 2);
        let b = t.coordinate_derivatives(&c).unwrap();
        let h = 1e-4;
        let cell = t.cell().clone();
        let mut lap_fd = Complex64::new(0.0, 0.0);
        let f0 = t.log_psi(&c).unwrap();
        for i in 0..c.n_particles() {
            for a in 0..3 {
                let shift = |s: f64| {
                    let mut cc = c.clone();
                    let mut r = c.position(i);
                    r[a] += s;
                    cc.set_position(i, r, &cell);
                    t.log_psi(&cc).unwrap().log_ratio(&f0)
                };
                let (p, m) = (shift(h), shift(-h));
                let g = (shift(1e-5) - shift(-1e-5)) / 2e-5;
                assert!((g - b.grad_log[i][a]).norm() < 1e-6 * (1.0 + g.norm()), "{i},{a}: {g} vs {}", b.grad_log[i][a]);
                lap_fd += (p + m) / (h * h);
            }
        }
        assert!((lap_fd - b.laplacian_log).norm() < 1e-4 * (1.0 + b.laplacian_log.norm()), "{lap_fd} vs {}", b.laplacian_log);
    }

    #[test]
    fn parameter_derivatives_match_finite_differences() {
        let mut t = trial(2, 2, 2.0, 3);
        let c = random_config(&t, 4);
        let o = t.param_log_derivs(&c).unwrap();
        let p0 = t.params().to_vec();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += h;
            t.set_params(&p).unwrap();
            let up = t.log_psi(&c).unwrap();
            p[k] -= 2.0 * h;
            t.set_params(&p).unwrap();
            let dn = t.log_psi(&c).unwrap();
            let fd = up.log_ratio(&dn) / (2.0 * h);
            assert!((fd - o[k]).norm() < 1e-6 * (1.0 + o[k].norm()));
            t.set_params(&p0).unwrap();
        }
    }

    /// With the cusp coefficients the divergence of the Coulomb energy at an
    /// antiparallel coalescence is cancelled by the kinetic energy.
    #[test]
    fn antiparallel_cusp_keeps_local_energy_finite() {
        let t = trial(1, 1, 2.0, 5);
        let cell = t.cell().clone();
        let ewald = EwaldContext::new(&cell, 1e-10).unwrap();
        let e_at = |d: f64| {
            let c = ParticleConfiguration::new(vec![[0.7, 0.9, 1.1], [0.7 + d * 0.6, 0.9 + d * 0.8, 1.1]], &cell).unwrap();
            crate::wavefunction::local_energy(&t, &c, Some(&ewald)).unwrap().re
        };
        let (a, b) = (e_at(1e-3), e_at(1e-5));
        assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        // without the cusp the energy blows up like 1/(r_s d)
        let bare = SlaterJastrow::slater_only(&cell, OrbitalSet::plane_waves(&cell, [0, 0, 0])).unwrap();
        let c = ParticleConfiguration::new(vec![[0.7, 0.9, 1.1], [0.7 + 1e-5 * 0.6, 0.9 + 1e-5 * 0.8, 1.1]], &cell).unwrap();
        assert!(crate::wavefunction::local_energy(&bare, &c, Some(&ewald)).unwrap().re > 1e4);
    }

    #[test]
    fn free_displacement_has_propagator_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (tau, r_s) = (0.04, 2.0);
        let d = free_displacement(&mut rng, 20_000, tau, r_s);
        let xs: Vec<f64> = d.iter().flatten().copied().collect();
        let n = xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
        let expect = tau / (r_s * r_s);
        // the variance of the sample variance of a normal is 2σ⁴/n
        assert!((var - expect).abs() < 3.0 * expect * (2.0 / n).sqrt(), "{var} vs {expect}");
    }

    #[test]
    fn tiny_time_step_leaves_weights_near_one() {
        let t = trial(2, 2, 1.0, 7);
        let configs = initial_configurations(&t, 20, 8, 20).unwrap();
        let ewald = EwaldContext::new(t.cell(), 1e-8).unwrap();
        let mut pop = DmcPopulation::new(&t, configs, Some(&ewald), 9).unwrap();
        pop.trial_energy = 0.0;
        let rep = dmc_step(&mut pop, &t, 1e-9, Some(&ewald)).unwrap();
        assert!((rep.mean_weight - 1.0).abs() < 1e-5, "{}", rep.mean_weight);
        assert_eq!(rep.killed, 0);
        assert_eq!(pop.walkers.len(), 20);
    }

    #[test]
    fn invalid_time_step_is_rejected() {
        let t = trial(1, 1, 1.0, 0);
        let mut pop = DmcPopulation::new(&t, vec![random_config(&t, 1)], None, 0).unwrap();
        assert!(matches!(dmc_step(&mut pop, &t, 0.0, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn resampling_is_weight_proportional() {
        let t = trial(1, 1, 1.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ws: Vec<DmcWalker> = (0..4).map(|k| DmcWalker::new(&t, random_config(&t, k), None).unwrap()).collect();
        for (w, x) in ws.iter_mut().zip([0.0, 3.0, 1.0, 0.0]) {
            w.weight = x;
        }
        let out = resample(&ws, 400, &mut rng);
        assert_eq!(out.len(), 400);
        let from = |k: usize| out.iter().filter(|w| w.config == ws[k].config).count();
        assert_eq!(from(0) + from(3), 0);
        assert_eq!(from(1), 300);
        assert_eq!(from(2), 100);
        assert!(out.iter().all(|w| w.weight == 1.0));
    }

    /// For a plane-wave determinant without interaction the mirror-averaged
    /// ratio has expectation `exp(−E_kin δτ)` at every configuration, so the
    /// growth estimator returns the kinetic energy for any time step.
    #[test]
    fn free_gas_growth_estimator_is_exact() {
        let cell = SimulationCell::new(7, 7, 1.0).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [0, 0, 0]);
        let exact = orbs.all().map(|o| 0.5 * orbs.k_squared(o)).sum::<f64>() / 14.0;
        let t = SlaterJastrow::slater_only(&cell, orbs).unwrap();
        for tau in [0.01, 0.005] {
            let configs = initial_configurations(&t, 100, 11, 30).unwrap();
            let mut pop = DmcPopulation::new(&t, configs, None, 12).unwrap();
            let cfg = DmcConfig {
                time_step: Some(tau),
                equilibration_steps: 5,
                production_steps: 200,
                ..DmcConfig::default()
            };
            let est = run_dmc(&mut pop, &t, &cfg, None, |_, _| {}).unwrap();
            assert!((est.mixed.mean - exact).abs() < 1e-9);
            assert!((est.growth.mean - exact).abs() < 4.0 * est.growth.error.max(1e-6), "τ={tau}: {:?} vs {exact}", est.growth);
        }
    }

    #[test]
    fn jastrow_optimization_keeps_cusp_and_does_not_raise_energy() {
        let cell = SimulationCell::new(2, 1, 2.0).unwrap();
        let mut t = SlaterJastrow::new(&cell, OrbitalSet::plane_waves(&cell, [0, 0, 0]), 3).unwrap();
        let ewald = EwaldContext::new(&cell, 1e-8).unwrap();
        let mut ens = WalkerEnsemble::new(&t, 200, 13, default_step_size(&cell), MoveKind::SingleParticle).unwrap();
        ens.burn_in(&t, 50, 0.5).unwrap();
        let sr = SrConfig {
            solver: crate::sr::SrSolver::Dense,
            ..SrConfig::default()
        };
        let res = optimize_jastrow(&mut t, &mut ens, Some(&ewald), &sr, 0.1, 30, 64).unwrap();
        assert_eq!(t.cusp_coefficients(), [0.5, 1.0]);
        assert!(!res.reverted);
        let sigma = (res.baseline.1.powi(2) + res.optimized.1.powi(2)).sqrt();
        assert!(res.optimized.0 <= res.baseline.0 + 3.0 * sigma, "{res:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn jastrow_is_symmetric_and_translation_invariant(seed in 0u64..1000, t in prop::array::uniform3(-4.0f64..4.0)) {
            let tr = trial(3, 3, 1.0, seed);
            let c = random_config(&tr, seed + 1);
            let j = tr.jastrow(&c);
            prop_assert!((tr.jastrow(&c.swapped(0, 2)) - j).abs() < 1e-12);
            prop_assert!((tr.jastrow(&c.swapped(3, 5)) - j).abs() < 1e-12);
            prop_assert!((tr.jastrow(&c.translated(t, tr.cell())) - j).abs() < 1e-12);
        }
    }
}
