//! Variational Monte Carlo: local-energy sampling and the SR loop.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewald::EwaldContext;
use crate::sampler::{MoveStats, WalkerEnsemble};
use crate::sr::{estimate_force, sr_update, EstimatorAccumulator, QgtOperator, SrConfig};
use crate::stats::naive_error;
use crate::wavefunction::{potential, Wavefunction};

/// Samples drawn from one ensemble snapshot.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub acc: EstimatorAccumulator,
    pub moves: MoveStats,
    /// Walkers whose derivatives could not be evaluated.
    pub skipped: usize,
}

impl SampleSet {
    /// Mean real local energy and its naive standard error over walkers.
    pub fn energy(&self) -> (f64, f64) {
        let e: Vec<f64> = self.acc.energies().iter().map(|e| e.re).collect();
        (crate::stats::mean(&e), naive_error(&e))
    }
}

/// Advances the ensemble by `sweeps` and evaluates local energies, and
/// parameter log-derivatives when `with_params`.
pub fn sample<W: Wavefunction + ?Sized>(
    wf: &W,
    ensemble: &mut WalkerEnsemble,
    ewald: Option<&EwaldContext>,
    sweeps: usize,
    with_params: bool,
) -> Result<SampleSet> {
    let mut moves = MoveStats::default();
    for _ in 0..sweeps {
        moves.add(&ensemble.metropolis_sweep(wf)?);
    }
    let cell = wf.cell();
    let r_s = cell.r_s();
    let rows: Vec<Option<(Complex64, Vec<Complex64>)>> = ensemble
        .walkers
        .par_iter()
        .map(|w| {
            let b = if with_params {
                wf.derivatives(&w.config)
            } else {
                wf.coordinate_derivatives(&w.config)
            };
            let b = match b {
                Ok(b) => b,
                Err(Error::Singular(_)) | Err(Error::Divergence(..)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let v = match potential(&w.config, cell, ewald) {
                Ok(v) => v,
                Err(Error::Divergence(..)) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(Some((b.kinetic_energy(r_s) + v, b.param_log_derivs)))
        })
        .collect::<Result<_>>()?;
    let mut acc = EstimatorAccumulator::new(if with_params { wf.n_params() } else { 0 });
    let mut skipped = 0;
    for row in rows {
        match row {
            Some((e, o)) if e.re.is_finite() && o.iter().all(|v| v.re.is_finite() && v.im.is_finite()) => acc.push(e, &o),
            _ => skipped += 1,
        }
    }
    Ok(SampleSet { acc, moves, skipped })
}

/// One optimization step, reported per particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmcStepReport {
    pub iteration: usize,
    pub energy: f64,
    pub error: f64,
    pub acceptance: f64,
    pub force_norm: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

/// Samples at the current parameters, then applies one SR update. The
/// reported energy belongs to the parameters before the update.
pub fn sr_iteration<W: Wavefunction + ?Sized>(
    wf: &mut W,
    ensemble: &mut WalkerEnsemble,
    ewald: Option<&EwaldContext>,
    sr: &SrConfig,
    eta: f64,
    sweeps: usize,
    iteration: usize,
) -> Result<VmcStepReport> {
    let set = sample(&*wf, ensemble, ewald, sweeps, true)?;
    if set.skipped > 0 {
        log::debug!("iteration {iteration}: skipped {} walkers at singular configurations", set.skipped);
    }
    let n = wf.cell().n_particles() as f64;
    let (e, err) = set.energy();
    if !e.is_finite() {
        return Err(Error::Numerical(format!("non-finite energy at iteration {iteration}")));
    }
    // gradient of the energy per particle, so that one learning rate
    // serves every particle number
    let force: Vec<f64> = estimate_force(&set.acc)?.iter().map(|f| f / n).collect();
    let qgt = QgtOperator::new(&set.acc)?;
    let step = sr_update(wf.params(), &force, &qgt, sr, eta)?;
    wf.set_params(&step.params)?;
    ensemble.refresh(&*wf)?;
    Ok(VmcStepReport {
        iteration,
        energy: e / n,
        error: err / n,
        acceptance: set.moves.rate(),
        force_norm: force.iter().map(|f| f * f).sum::<f64>().sqrt(),
        cg_iterations: step.cg_iterations,
        cg_residual: step.cg_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::SimulationCell;
    use crate::mpnn::NetworkConfig;
    use crate::orbitals::OrbitalSet;
    use crate::sampler::MoveKind;
    use crate::wavefunction::MpNqs;

    #[test]
    fn free_electron_energy_has_no_spread() {
        let cell = SimulationCell::new(7, 7, 1.0).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [0, 0, 0]);
        let exact: f64 = orbs.all().map(|o| 0.5 * orbs.k_squared(o)).sum();
        let cfg = NetworkConfig {
            steps: 0,
            ..NetworkConfig::default()
        };
        let mut wf = MpNqs::new(&cell, orbs, &cfg).unwrap();
        wf.zero_backflow_and_jastrow();
        let mut ens = WalkerEnsemble::new(&wf, 8, 3, 0.3, MoveKind::SingleParticle).unwrap();
        let set = sample(&wf, &mut ens, None, 2, false).unwrap();
        let (e, err) = set.energy();
        assert!((e - exact).abs() < 1e-9, "{e} vs {exact}");
        assert!(err < 1e-9);
    }

    #[test]
    fn sr_step_reports_and_moves_parameters() {
        let cell = SimulationCell::new(2, 1, 2.0).unwrap();
        let orbs = OrbitalSet::plane_waves(&cell, [0, 0, 0]);
        let cfg = NetworkConfig {
            embedding_dim: 4,
            node_hidden: 4,
            edge_hidden: 4,
            mlp_width: 4,
            jastrow_width: 4,
            ..NetworkConfig::default()
        };
        let mut wf = MpNqs::new(&cell, orbs, &cfg).unwrap();
        let before = wf.params().to_vec();
        let ewald = EwaldContext::new(&cell, 1e-8).unwrap();
        let mut ens = WalkerEnsemble::new(&wf, 16, 4, 0.5, MoveKind::SingleParticle).unwrap();
        let rep = sr_iteration(&mut wf, &mut ens, Some(&ewald), &SrConfig::default(), 0.05, 2, 0).unwrap();
        assert!(rep.energy.is_finite() && rep.error >= 0.0);
        assert!(rep.force_norm > 0.0);
        assert!((0.0..=1.0).contains(&rep.acceptance));
        assert_ne!(before, wf.params());
    }
}
