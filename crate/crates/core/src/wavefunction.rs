//! Neural backflow wavefunction: Slater determinants of plane-wave or
//! Gaussian orbitals evaluated at complex backflow coordinates, with each
//! orbital column scaled by `exp J(Y, μ)`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cell::{ParticleConfiguration, SimulationCell, Spin};
use crate::error::{Error, Result};
use crate::ewald::EwaldContext;
use crate::linalg::{wrap_phase, CMatrix, ComplexLu};
use crate::mpnn::{Architecture, NetCache, NetworkConfig, NetworkParameters, JASTROW_COORD_INPUTS, JASTROW_ORBITAL_INPUTS};
use crate::nn::{gelu_jet, Jets};
use crate::orbitals::{OrbitalKind, OrbitalSet, HESS_PAIRS};

/// `log Ψ = log_modulus + i·phase`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogAmplitude {
    pub log_modulus: f64,
    /// Radians in `(-π, π]`.
    pub phase: f64,
}

impl LogAmplitude {
    pub fn from_complex(z: Complex64) -> Self {
        Self {
            log_modulus: z.re,
            phase: wrap_phase(z.im),
        }
    }

    pub fn as_complex(&self) -> Complex64 {
        Complex64::new(self.log_modulus, self.phase)
    }

    /// `log(Ψ_self / Ψ_other)` with the phase difference wrapped.
    pub fn log_ratio(&self, other: &LogAmplitude) -> Complex64 {
        Complex64::new(self.log_modulus - other.log_modulus, wrap_phase(self.phase - other.phase))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeBundle {
    pub log_psi: LogAmplitude,
    /// `∇_i log Ψ`.
    pub grad_log: Vec<[Complex64; 3]>,
    /// `Σ_i ∇²_i log Ψ`.
    pub laplacian_log: Complex64,
    /// `∂_θ log Ψ` for every parameter.
    pub param_log_derivs: Vec<Complex64>,
}

impl DerivativeBundle {
    /// Kinetic part of the local energy, `−(Δ log Ψ + (∇ log Ψ)²)/(2 r_s²)`,
    /// using the complex square.
    pub fn kinetic_energy(&self, r_s: f64) -> Complex64 {
        let mut g2 = Complex64::new(0.0, 0.0);
        for g in &self.grad_log {
            g2 += g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        }
        -(self.laplacian_log + g2) / (2.0 * r_s * r_s)
    }
}

/// A trial state that can be sampled and optimized.
pub trait Wavefunction: Send + Sync {
    fn cell(&self) -> &SimulationCell;

    fn log_psi(&self, config: &ParticleConfiguration) -> Result<LogAmplitude>;

    /// Coordinate derivatives only; `param_log_derivs` is left empty.
    fn coordinate_derivatives(&self, config: &ParticleConfiguration) -> Result<DerivativeBundle>;

    /// Coordinate and parameter derivatives.
    fn derivatives(&self, config: &ParticleConfiguration) -> Result<DerivativeBundle> {
        let mut b = self.coordinate_derivatives(config)?;
        b.param_log_derivs = self.param_log_derivs(config)?;
        Ok(b)
    }

    fn param_log_derivs(&self, config: &ParticleConfiguration) -> Result<Vec<Complex64>>;

    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

/// `E_loc = −(Δ log Ψ + (∇ log Ψ)²)/(2 r_s²) + V`. Passing no Ewald context
/// switches the interaction off.
pub fn local_energy<W: Wavefunction + ?Sized>(wf: &W, config: &ParticleConfiguration, ewald: Option<&EwaldContext>) -> Result<Complex64> {
    let b = wf.coordinate_derivatives(config)?;
    let v = potential(config, wf.cell(), ewald)?;
    Ok(b.kinetic_energy(wf.cell().r_s()) + v)
}

pub fn potential(config: &ParticleConfiguration, cell: &SimulationCell, ewald: Option<&EwaldContext>) -> Result<f64> {
    match ewald {
        Some(e) => e.potential_energy(config, cell),
        None => Ok(0.0),
    }
}

/// Message-passing neural backflow state.
#[derive(Clone, Debug)]
pub struct MpNqs {
    cell: SimulationCell,
    orbitals: OrbitalSet,
    net: NetworkParameters,
}

enum Mode {
    Value,
    Coords,
    Params,
}

struct Evaluation {
    log_psi: Complex64,
    grad: Vec<Complex64>,
    lap: Complex64,
    params: Vec<Complex64>,
}

impl MpNqs {
    pub fn new(cell: &SimulationCell, orbitals: OrbitalSet, config: &NetworkConfig) -> Result<Self> {
        if orbitals.len() != cell.n_particles()
            || orbitals.orbitals(Spin::Up).len() != cell.n_up()
            || orbitals.orbitals(Spin::Down).len() != cell.n_down()
        {
            return Err(Error::InvalidInput("orbital set does not match the cell's spin populations".into()));
        }
        let gaussian = orbitals.kind() == OrbitalKind::GaussianBcc;
        let arch = Arc::new(Architecture::new(config, gaussian)?);
        let net = NetworkParameters::init(arch, gaussian.then(|| orbitals.alpha()));
        Ok(Self {
            cell: cell.clone(),
            orbitals,
            net,
        })
    }

    pub fn network(&self) -> &NetworkParameters {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut NetworkParameters {
        &mut self.net
    }

    pub fn orbitals(&self) -> &OrbitalSet {
        &self.orbitals
    }

    /// Sets the output map and the orbital factor network to zero, leaving
    /// the bare determinant at the unshifted positions.
    pub fn zero_backflow_and_jastrow(&mut self) {
        for name in ["w_out.re", "w_out.im"] {
            self.net.block_mut(name).unwrap().fill(0.0);
        }
        self.zero_jastrow();
    }

    pub fn zero_jastrow(&mut self) {
        let names: Vec<String> = self
            .net
            .arch
            .layout
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("jastrow.1"))
            .map(|e| e.name.clone())
            .collect();
        for n in names {
            self.net.block_mut(&n).unwrap().fill(0.0);
        }
    }

    fn sync_orbitals(&mut self) -> Result<()> {
        if let Some(a) = self.net.alpha() {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidState(format!("Gaussian width parameter must stay positive, got {a}")));
            }
            self.orbitals = self.orbitals.with_alpha(a);
        }
        Ok(())
    }

    fn encodings(&self) -> Vec<[f64; 4]> {
        self.orbitals.all().map(|o| self.orbitals.encoding(o)).collect()
    }

    /// Particle indices grouped by spin, up first.
    fn spin_groups(&self, spins: &[Spin]) -> Result<[Vec<usize>; 2]> {
        let up: Vec<usize> = (0..spins.len()).filter(|&i| spins[i] == Spin::Up).collect();
        let down: Vec<usize> = (0..spins.len()).filter(|&i| spins[i] == Spin::Down).collect();
        if up.len() != self.cell.n_up() || down.len() != self.cell.n_down() {
            return Err(Error::InvalidInput("configuration spins do not match the cell".into()));
        }
        Ok([up, down])
    }

    fn evaluate(&self, config: &ParticleConfiguration, mode: Mode) -> Result<Evaluation> {
        let n = config.n_particles();
        if n != self.cell.n_particles() {
            return Err(Error::InvalidInput(format!("configuration has {n} particles, cell has {}", self.cell.n_particles())));
        }
        let positions = config.positions();
        let spins = config.spins();
        let groups = self.spin_groups(spins)?;
        let derivs = matches!(mode, Mode::Coords);
        let mut cache = NetCache::default();
        let bj = self.net.backflow_jets(
            positions,
            spins,
            &self.cell,
            derivs,
            matches!(mode, Mode::Params).then_some(&mut cache),
        );
        let enc = self.encodings();
        let ng = 3 * n;

        let mut grad = vec![Complex64::new(0.0, 0.0); if derivs { ng } else { 0 }];
        let mut lap = Complex64::new(0.0, 0.0);
        let mut grads = if matches!(mode, Mode::Params) {
            vec![vec![0.0; self.net.len()], vec![0.0; self.net.len()]]
        } else {
            Vec::new()
        };
        // adjoint seeds for Re δr and Im δr, layout [i][seed][axis]
        let mut d_re = vec![0.0; n * 6];
        let mut d_im = vec![0.0; n * 6];

        let j_val = if derivs {
            self.jastrow_jets(&bj, &enc, &mut grad, &mut lap)
        } else if matches!(mode, Mode::Params) {
            self.jastrow_backward(&bj, &enc, &mut d_re, &mut d_im, &mut grads[0])
        } else {
            self.jastrow_value(&bj, &enc)
        };

        // complex coordinates and, in derivative mode, their jets
        let y: Vec<[Complex64; 3]> = (0..n)
            .map(|i| {
                let (r, m) = (bj.re.value(i), bj.im.value(i));
                let p = positions[i];
                [
                    Complex64::new(p[0] + r[0], m[0]),
                    Complex64::new(p[1] + r[1], m[1]),
                    Complex64::new(p[2] + r[2], m[2]),
                ]
            })
            .collect();
        let (dy, lap_y, y2) = if derivs {
            coordinate_jets(&bj, n)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };

        let mut log_det = Complex64::new(0.0, 0.0);
        let mut d_alpha = Complex64::new(0.0, 0.0);
        for (spin, rows) in [Spin::Up, Spin::Down].into_iter().zip(groups.iter()) {
            let orbs = self.orbitals.orbitals(spin);
            let m = rows.len();
            if m == 0 {
                continue;
            }
            let need_jets = !matches!(mode, Mode::Value);
            let mut phi = CMatrix::zeros(m);
            let mut jets = Vec::with_capacity(if need_jets { m * m } else { 0 });
            for (r, &p) in rows.iter().enumerate() {
                for (c, o) in orbs.iter().enumerate() {
                    if need_jets {
                        let jt = self.orbitals.jet(o, y[p]);
                        phi.set(r, c, jt.value);
                        jets.push(jt);
                    } else {
                        phi.set(r, c, self.orbitals.value(o, y[p]));
                    }
                }
            }
            let lu = ComplexLu::factor(&phi)?;
            log_det += Complex64::new(lu.log_abs_det(), lu.phase());
            if !need_jets {
                continue;
            }
            let inv = lu.inverse();
            // c_{r,a} = ∂ log det / ∂ y_{p_r, a}
            let mut cpa = vec![[Complex64::new(0.0, 0.0); 3]; m];
            for r in 0..m {
                for c in 0..m {
                    let w = inv.get(c, r);
                    let jt = &jets[r * m + c];
                    for a in 0..3 {
                        cpa[r][a] += w * jt.grad[a];
                    }
                    d_alpha += w * jt.d_alpha;
                }
            }
            if matches!(mode, Mode::Params) {
                for (r, &p) in rows.iter().enumerate() {
                    for a in 0..3 {
                        let cv = cpa[r][a];
                        d_re[p * 6 + a] += cv.re;
                        d_re[p * 6 + 3 + a] += cv.im;
                        d_im[p * 6 + a] -= cv.im;
                        d_im[p * 6 + 3 + a] += cv.re;
                    }
                }
                continue;
            }
            // first derivatives and the tr(Φ⁻¹ ΔΦ) part
            for (r, &p) in rows.iter().enumerate() {
                for k in 0..ng {
                    let mut s = Complex64::new(0.0, 0.0);
                    for a in 0..3 {
                        s += cpa[r][a] * dy[(p * 3 + a) * ng + k];
                    }
                    grad[k] += s;
                }
                for c in 0..m {
                    let jt = &jets[r * m + c];
                    let mut dphi = Complex64::new(0.0, 0.0);
                    for a in 0..3 {
                        dphi += jt.grad[a] * lap_y[p * 3 + a];
                    }
                    for (slot, &(a, b)) in HESS_PAIRS.iter().enumerate() {
                        let mult = if a == b { 1.0 } else { 2.0 };
                        dphi += jt.hess[slot] * y2[p * 6 + slot] * mult;
                    }
                    lap += inv.get(c, r) * dphi;
                }
            }
            // − Σ_k tr((Φ⁻¹ ∂_k Φ)²)
            let mut dk = vec![Complex64::new(0.0, 0.0); m * m];
            let mut bk = vec![Complex64::new(0.0, 0.0); m * m];
            for k in 0..ng {
                for (r, &p) in rows.iter().enumerate() {
                    let (d0, d1, d2) = (dy[(p * 3) * ng + k], dy[(p * 3 + 1) * ng + k], dy[(p * 3 + 2) * ng + k]);
                    for c in 0..m {
                        let g = &jets[r * m + c].grad;
                        dk[r * m + c] = g[0] * d0 + g[1] * d1 + g[2] * d2;
                    }
                }
                for a in 0..m {
                    for b in 0..m {
                        let mut s = Complex64::new(0.0, 0.0);
                        for c in 0..m {
                            s += inv.get(a, c) * dk[c * m + b];
                        }
                        bk[a * m + b] = s;
                    }
                }
                let mut tr = Complex64::new(0.0, 0.0);
                for a in 0..m {
                    for b in 0..m {
                        tr += bk[a * m + b] * bk[b * m + a];
                    }
                }
                lap -= tr;
            }
        }

        let log_psi = log_det + j_val;
        let params = if matches!(mode, Mode::Params) {
            self.net.backflow_backward(&cache, &d_re, &d_im, &mut grads);
            let mut o: Vec<Complex64> = grads[0].iter().zip(&grads[1]).map(|(&a, &b)| Complex64::new(a, b)).collect();
            if let Some(off) = self.net.arch.alpha {
                o[off] += d_alpha;
            }
            o
        } else {
            Vec::new()
        };
        Ok(Evaluation { log_psi, grad, lap, params })
    }

    /// First-layer weights of the orbital factor network split into the
    /// coordinate block and the per-orbital constant term.
    fn jastrow_split(&self, enc: &[[f64; 4]]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let l0 = self.net.arch.jastrow.layers[0];
        let l1 = self.net.arch.jastrow.layers[1];
        let p = &self.net.values;
        let h = l0.out;
        let ci = JASTROW_COORD_INPUTS;
        let mut a = vec![0.0; h * ci];
        let mut bmu = vec![0.0; enc.len() * h];
        for q in 0..h {
            let row = &p[l0.w + q * l0.inp..l0.w + (q + 1) * l0.inp];
            a[q * ci..(q + 1) * ci].copy_from_slice(&row[..ci]);
            for (mu, e) in enc.iter().enumerate() {
                let mut s = p[l0.b + q];
                for k in 0..JASTROW_ORBITAL_INPUTS {
                    s += row[ci + k] * e[k];
                }
                bmu[mu * h + q] = s;
            }
        }
        let w1 = p[l1.w..l1.w + h].to_vec();
        (a, bmu, w1, p[l1.b])
    }

    fn jastrow_inputs(bj: &crate::mpnn::BackflowJets) -> Jets {
        bj.re.concat(&bj.im)
    }

    fn jastrow_value(&self, bj: &crate::mpnn::BackflowJets, enc: &[[f64; 4]]) -> Complex64 {
        let (a, bmu, w1, b1) = self.jastrow_split(enc);
        let h = w1.len();
        let pre = Self::jastrow_inputs(bj).linear(&a, None, h);
        let n = pre.items;
        let mut j = b1 * (n * enc.len()) as f64;
        for i in 0..n {
            let ai = pre.value(i);
            for mu in 0..enc.len() {
                for q in 0..h {
                    j += w1[q] * crate::nn::gelu(ai[q] + bmu[mu * h + q]);
                }
            }
        }
        Complex64::new(j, 0.0)
    }

    fn jastrow_jets(&self, bj: &crate::mpnn::BackflowJets, enc: &[[f64; 4]], grad: &mut [Complex64], lap: &mut Complex64) -> Complex64 {
        let (a, bmu, w1, b1) = self.jastrow_split(enc);
        let h = w1.len();
        let pre = Self::jastrow_inputs(bj).linear(&a, None, h);
        let n = pre.items;
        let ng = pre.ngrad;
        let mut j = b1 * (n * enc.len()) as f64;
        for i in 0..n {
            let blk = pre.item(i);
            for q in 0..h {
                let (mut c1, mut c2) = (0.0, 0.0);
                for mu in 0..enc.len() {
                    let (s0, s1, s2) = gelu_jet(blk[q] + bmu[mu * h + q]);
                    j += w1[q] * s0;
                    c1 += w1[q] * s1;
                    c2 += w1[q] * s2;
                }
                let mut g2 = 0.0;
                for ch in 1..=ng {
                    let g = blk[ch * h + q];
                    g2 += g * g;
                    grad[ch - 1] += c1 * g;
                }
                *lap += c1 * blk[(ng + 1) * h + q] + c2 * g2;
            }
        }
        Complex64::new(j, 0.0)
    }

    /// Value pass plus reverse pass of the orbital factor network. Writes
    /// parameter gradients into `g` and input adjoints into the seed-0
    /// slots of `d_re`/`d_im`.
    fn jastrow_backward(&self, bj: &crate::mpnn::BackflowJets, enc: &[[f64; 4]], d_re: &mut [f64], d_im: &mut [f64], g: &mut [f64]) -> Complex64 {
        let (a, bmu, w1, b1) = self.jastrow_split(enc);
        let l0 = self.net.arch.jastrow.layers[0];
        let l1 = self.net.arch.jastrow.layers[1];
        let h = w1.len();
        let u = Self::jastrow_inputs(bj);
        let pre = u.linear(&a, None, h);
        let n = pre.items;
        let nmu = enc.len();
        let ci = JASTROW_COORD_INPUTS;
        let mut j = b1 * (n * nmu) as f64;
        g[l1.b] += (n * nmu) as f64;
        let mut d_b = vec![0.0; nmu * h];
        for i in 0..n {
            let ai = pre.value(i);
            let ui = u.value(i);
            for q in 0..h {
                let mut c1 = 0.0;
                for mu in 0..nmu {
                    let (s0, s1, _) = gelu_jet(ai[q] + bmu[mu * h + q]);
                    j += w1[q] * s0;
                    g[l1.w + q] += s0;
                    c1 += w1[q] * s1;
                    d_b[mu * h + q] += w1[q] * s1;
                }
                for k in 0..ci {
                    g[l0.w + q * l0.inp + k] += c1 * ui[k];
                    let du = c1 * a[q * ci + k];
                    if k < 3 {
                        d_re[i * 6 + k] += du;
                    } else {
                        d_im[i * 6 + (k - 3)] += du;
                    }
                }
            }
        }
        for mu in 0..nmu {
            for q in 0..h {
                let d = d_b[mu * h + q];
                g[l0.b + q] += d;
                for k in 0..JASTROW_ORBITAL_INPUTS {
                    g[l0.w + q * l0.inp + ci + k] += d * enc[mu][k];
                }
            }
        }
        Complex64::new(j, 0.0)
    }
}

/// Jets of `y = r + δr`: `∂_k y_{pa}` (`[p][a][k]`), `Δ y_{pa}` and the
/// products `Σ_k ∂_k y_{pa} ∂_k y_{pb}` for the six Hessian pairs.
fn coordinate_jets(bj: &crate::mpnn::BackflowJets, n: usize) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
    let ng = 3 * n;
    let mut dy = vec![Complex64::new(0.0, 0.0); n * 3 * ng];
    let mut lap = vec![Complex64::new(0.0, 0.0); n * 3];
    for p in 0..n {
        for a in 0..3 {
            let row = &mut dy[(p * 3 + a) * ng..(p * 3 + a + 1) * ng];
            for (k, v) in row.iter_mut().enumerate() {
                *v = Complex64::new(bj.re.chan(p, 1 + k)[a], bj.im.chan(p, 1 + k)[a]);
            }
            row[p * 3 + a].re += 1.0;
            lap[p * 3 + a] = Complex64::new(bj.re.chan(p, ng + 1)[a], bj.im.chan(p, ng + 1)[a]);
        }
    }
    let mut y2 = vec![Complex64::new(0.0, 0.0); n * 6];
    for p in 0..n {
        for (slot, &(a, b)) in HESS_PAIRS.iter().enumerate() {
            let ra = &dy[(p * 3 + a) * ng..(p * 3 + a + 1) * ng];
            let rb = &dy[(p * 3 + b) * ng..(p * 3 + b + 1) * ng];
            y2[p * 6 + slot] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    (dy, lap, y2)
}

impl Wavefunction for MpNqs {
    fn cell(&self) -> &SimulationCell {
        &self.cell
    }

    fn log_psi(&self, config: &ParticleConfiguration) -> Result<LogAmplitude> {
        Ok(LogAmplitude::from_complex(self.evaluate(config, Mode::Value)?.log_psi))
    }

    fn coordinate_derivatives(&self, config: &ParticleConfiguration) -> Result<DerivativeBundle> {
        let ev = self.evaluate(config, Mode::Coords)?;
        let grad_log = ev.grad.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(DerivativeBundle {
            log_psi: LogAmplitude::from_complex(ev.log_psi),
            grad_log,
            laplacian_log: ev.lap,
            param_log_derivs: Vec::new(),
        })
    }

    fn param_log_derivs(&self, config: &ParticleConfiguration) -> Result<Vec<Complex64>> {
        Ok(self.evaluate(config, Mode::Params)?.params)
    }

    fn params(&self) -> &[f64] {
        &self.net.values
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.net.len() {
            return Err(Error::InvalidInput(format!("expected {} parameters, got {}", self.net.len(), params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        let old = std::mem::replace(&mut self.net.values, params.to_vec());
        if let Err(e) = self.sync_orbitals() {
            self.net.values = old;
            return Err(e);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbitals::OrbitalLabel;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small_net(seed: u64) -> NetworkConfig {
        NetworkConfig {
            steps: 1,
            embedding_dim: 4,
            node_hidden: 6,
            edge_hidden: 5,
            mlp_width: 8,
            jastrow_width: 6,
            output_init_scale: 0.5,
            seed,
            ..NetworkConfig::default()
        }
    }

    /// Randomizes biases and the output map so every path is active.
    fn randomize(wf: &mut MpNqs, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = wf.params().to_vec();
        for e in wf.network().arch.layout.entries() {
            if e.name.ends_with(".bias") || e.name.starts_with("w_out") {
                for v in &mut p[e.range()] {
                    *v = 0.2 * crate::nn::normal(&mut rng);
                }
            }
        }
        wf.set_params(&p).unwrap();
    }

    fn pw_state(n_up: usize, n_down: usize, steps: usize, seed: u64) -> (SimulationCell, MpNqs) {
        let cell = SimulationCell::new(n_up, n_down, 1.5).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [0, 0, 0]);
        let mut cfg = small_net(seed);
        cfg.steps = steps;
        let mut wf = MpNqs::new(&cell, orbs, &cfg).unwrap();
        randomize(&mut wf, seed + 1000);
        (cell, wf)
    }

    fn gauss_state(seed: u64) -> (SimulationCell, MpNqs) {
        let cell = SimulationCell::new(1, 1, 2.0).unwrap();
        let orbs = OrbitalSet::gaussian_bcc(&cell, None, 2).unwrap();
        let mut wf = MpNqs::new(&cell, orbs, &small_net(seed)).unwrap();
        randomize(&mut wf, seed + 2000);
        (cell, wf)
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / (1.0 + b.norm())
    }

    fn fd_check(cell: &SimulationCell, wf: &MpNqs, conf: &ParticleConfiguration) {
        let b = wf.coordinate_derivatives(conf).unwrap();
        let base = wf.log_psi(conf).unwrap();
        let n = conf.n_particles();
        let h = 1e-5;
        let hl = 1e-4;
        let mut lap = Complex64::new(0.0, 0.0);
        for p in 0..n {
            for a in 0..3 {
                let shifted = |d: f64| {
                    let mut pos = conf.positions().to_vec();
                    pos[p][a] += d;
                    let c = ParticleConfiguration::with_spins(pos, conf.spins().to_vec(), cell).unwrap();
                    wf.log_psi(&c).unwrap().log_ratio(&base)
                };
                let g = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert!(rel(g, b.grad_log[p][a]) < 1e-6, "grad {p} {a}: {g} vs {}", b.grad_log[p][a]);
                lap += (shifted(hl) + shifted(-hl)) / (hl * hl);
            }
        }
        assert!(rel(lap, b.laplacian_log) < 1e-5, "lap {lap} vs {}", b.laplacian_log);
        let lp = b.log_psi;
        assert!((lp.log_modulus - base.log_modulus).abs() < 1e-12);
    }

    #[test]
    fn coordinate_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, (nu, nd, steps)) in [(2, 1, 1), (3, 2, 2), (1, 1, 0), (4, 3, 1)].into_iter().enumerate() {
            let (cell, wf) = pw_state(nu, nd, steps, 10 + k as u64);
            for _ in 0..5 {
                let conf = ParticleConfiguration::random(&cell, &mut rng);
                fd_check(&cell, &wf, &conf);
            }
        }
    }

    #[test]
    fn gaussian_coordinate_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cell, wf) = gauss_state(3);
        for _ in 0..5 {
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            fd_check(&cell, &wf, &conf);
        }
    }

    fn param_fd_check(wf: &MpNqs, conf: &ParticleConfiguration, tol: f64) {
        let o = wf.param_log_derivs(conf).unwrap();
        let base = wf.log_psi(conf).unwrap();
        let h = 1e-6;
        let p0 = wf.params().to_vec();
        for k in 0..p0.len() {
            let at = |d: f64| {
                let mut w = wf.clone();
                let mut p = p0.clone();
                p[k] += d;
                w.set_params(&p).unwrap();
                w.log_psi(conf).unwrap().log_ratio(&base)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - o[k]).norm() < tol * (1.0 + fd.norm()), "param {k}: {fd} vs {}", o[k]);
        }
    }

    #[test]
    fn parameter_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (nu, nd, steps) in [(2, 1, 1), (2, 2, 2)] {
            let (cell, wf) = pw_state(nu, nd, steps, 40);
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            param_fd_check(&wf, &conf, 1e-6);
        }
        let (cell, wf) = gauss_state(41);
        let conf = ParticleConfiguration::random(&cell, &mut rng);
        param_fd_check(&wf, &conf, 1e-6);
    }

    #[test]
    fn gaussian_width_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cell, wf) = gauss_state(42);
        let off = wf.network().arch.alpha.unwrap();
        for _ in 0..3 {
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let o = wf.param_log_derivs(&conf).unwrap()[off];
            let base = wf.log_psi(&conf).unwrap();
            let h = 1e-6;
            let at = |d: f64| {
                let mut w = wf.clone();
                let mut p = w.params().to_vec();
                p[off] += d;
                w.set_params(&p).unwrap();
                w.log_psi(&conf).unwrap().log_ratio(&base)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!(rel(fd, o) < 1e-6, "{fd} vs {o}");
        }
    }

    #[test]
    fn same_spin_exchange_flips_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (cell, wf) = pw_state(3, 2, 1, 7);
        let conf = ParticleConfiguration::random(&cell, &mut rng);
        let a = wf.log_psi(&conf).unwrap();
        let b = wf.log_psi(&conf.swapped(0, 2)).unwrap();
        assert!((a.log_modulus - b.log_modulus).abs() < 1e-10);
        assert!(wrap_phase(b.phase - a.phase - PI).abs() < 1e-10);
    }

    #[test]
    fn two_particle_determinant_matches_hand_formula() {
        let cell = SimulationCell::new(2, 0, 1.0).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [1, 0, 0]);
        let ks: Vec<[i32; 3]> = orbs
            .orbitals(Spin::Up)
            .iter()
            .map(|o| match o.label {
                OrbitalLabel::PlaneWave { n } => n,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ks, vec![[0, 0, 0], [1, 0, 0]]);
        let mut wf = MpNqs::new(&cell, orbs, &small_net(1)).unwrap();
        wf.zero_backflow_and_jastrow();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kx = 2.0 * PI / cell.side();
        for _ in 0..5 {
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let (r1, r2) = (conf.position(0), conf.position(1));
            let expect = (Complex64::i() * (kx * r2[0])).exp() - (Complex64::i() * (kx * r1[0])).exp();
            let lp = wf.log_psi(&conf).unwrap();
            assert!((lp.log_modulus - expect.norm().ln()).abs() < 1e-10);
            assert!(wrap_phase(lp.phase - expect.arg()).abs() < 1e-10);
        }
    }

    #[test]
    fn column_scaling_shifts_log_psi() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cell, wf) = pw_state(2, 2, 1, 11);
        let conf = ParticleConfiguration::random(&cell, &mut rng);
        let a = wf.log_psi(&conf).unwrap();
        // the output bias adds c to j(y_i, μ); J(Y, μ) shifts by N·c for every μ
        let mut w2 = wf.clone();
        let mut p = w2.params().to_vec();
        let c = 0.37;
        p[wf.network().arch.jastrow.layers[1].b] += c;
        w2.set_params(&p).unwrap();
        let b = w2.log_psi(&conf).unwrap();
        let n = 4.0;
        assert!((b.log_modulus - a.log_modulus - n * (n * c)).abs() < 1e-10);
        assert!(wrap_phase(b.phase - a.phase).abs() < 1e-10);
    }

    #[test]
    fn free_electrons_have_zero_variance_kinetic_energy() {
        let cell = SimulationCell::new(7, 7, 2.0).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [0, 0, 0]);
        let expect: f64 = orbs.all().map(|o| orbs.k_squared(o)).sum::<f64>() / (2.0 * 4.0);
        let mut wf = MpNqs::new(&cell, orbs, &NetworkConfig::default()).unwrap();
        wf.zero_backflow_and_jastrow();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..4 {
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let e = local_energy(&wf, &conf, None).unwrap();
            assert!((e.re - expect).abs() < 1e-9, "{e} vs {expect}");
            assert!(e.im.abs() < 1e-9);
        }
    }

    #[test]
    fn local_energy_is_exchange_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (cell, wf) = pw_state(2, 2, 1, 13);
        let ew = EwaldContext::new(&cell, 1e-8).unwrap();
        let conf = ParticleConfiguration::random(&cell, &mut rng);
        let a = local_energy(&wf, &conf, Some(&ew)).unwrap();
        let b = local_energy(&wf, &conf.swapped(0, 1), Some(&ew)).unwrap();
        let c = local_energy(&wf, &conf.swapped(2, 3), Some(&ew)).unwrap();
        assert!((a - b).norm() < 1e-9 * (1.0 + a.norm()));
        assert!((a - c).norm() < 1e-9 * (1.0 + a.norm()));
    }

    #[test]
    fn spin_flip_keeps_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (cell, wf) = pw_state(2, 2, 1, 15);
        for _ in 0..3 {
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let flipped: Vec<Spin> = conf.spins().iter().map(|s| s.flipped()).collect();
            let fc = ParticleConfiguration::with_spins(conf.positions().to_vec(), flipped, &cell).unwrap();
            let a = wf.log_psi(&conf).unwrap();
            let b = wf.log_psi(&fc).unwrap();
            assert!((a.log_modulus - b.log_modulus).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_nonpositive_gaussian_width() {
        let (_, mut wf) = gauss_state(16);
        let off = wf.network().arch.alpha.unwrap();
        let mut p = wf.params().to_vec();
        p[off] = -1.0;
        assert!(wf.set_params(&p).is_err());
        assert!(wf.network().alpha().unwrap() > 0.0);
    }

    #[test]
    fn coincident_same_spin_particles_report_singularity() {
        let (cell, mut wf) = pw_state(2, 0, 1, 17);
        wf.zero_backflow_and_jastrow();
        let conf = ParticleConfiguration::new(vec![[0.3, 0.4, 0.5], [0.3, 0.4, 0.5]], &cell).unwrap();
        assert!(matches!(wf.log_psi(&conf), Err(Error::Singular(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn log_psi_is_translation_invariant_without_jastrow(
            tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64, seed in 0u64..20
        ) {
            let (cell, mut wf) = pw_state(3, 3, 1, seed);
            wf.zero_jastrow();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let a = wf.log_psi(&conf).unwrap();
            let b = wf.log_psi(&conf.translated([tx, ty, tz], &cell)).unwrap();
            prop_assert!((a.log_modulus - b.log_modulus).abs() < 1e-10);
            prop_assert!(wrap_phase(a.phase - b.phase).abs() < 1e-10);
        }

        #[test]
        fn log_psi_is_periodic(k in 0usize..5, axis in 0usize..3, m in -2i32..3, seed in 0u64..20) {
            let (cell, wf) = pw_state(3, 2, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let conf = ParticleConfiguration::random(&cell, &mut rng);
            let base = wf.log_psi(&conf).unwrap();
            let mut pos = conf.positions().to_vec();
            pos[k][axis] += m as f64 * cell.side();
            let shifted = ParticleConfiguration::with_spins(pos, conf.spins().to_vec(), &cell).unwrap();
            let b = wf.log_psi(&shifted).unwrap();
            prop_assert!((base.log_modulus - b.log_modulus).abs() < 1e-10);
            prop_assert!(wrap_phase(base.phase - b.phase).abs() < 1e-10);
        }
    }
}
