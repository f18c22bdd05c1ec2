//! Metropolis sampling of `|Ψ|²` with Gaussian moves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{ParticleConfiguration, SimulationCell};
use crate::error::{Error, Result};
use crate::wavefunction::{LogAmplitude, Wavefunction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    /// `N` sequential one-particle moves per sweep.
    #[default]
    SingleParticle,
    /// One move of all particles at once per sweep.
    AllParticle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_walkers: usize,
    pub sweeps_per_sample: usize,
    pub burn_in: usize,
    /// Initial proposal width in scaled units; defaults to a fifth of the
    /// mean interparticle spacing.
    pub step_size: Option<f64>,
    pub target_acceptance: f64,
    pub moves: MoveKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_walkers: 1024,
            sweeps_per_sample: 1,
            burn_in: 200,
            step_size: None,
            target_acceptance: 0.5,
            moves: MoveKind::SingleParticle,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_walkers == 0 {
            return Err(Error::Config("sampler.n_walkers must be positive".into()));
        }
        if self.sweeps_per_sample == 0 {
            return Err(Error::Config("sampler.sweeps_per_sample must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("sampler.target_acceptance must lie in (0, 1)".into()));
        }
        if let Some(s) = self.step_size {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config("sampler.step_size must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn default_step_size(cell: &SimulationCell) -> f64 {
    0.2 * cell.side() / (cell.n_particles() as f64).cbrt()
}

/// Metropolis acceptance for a change `Δ = log|Ψ'| − log|Ψ|`.
#[inline]
pub fn acceptance_probability(delta_log_modulus: f64) -> f64 {
    if delta_log_modulus >= 0.0 {
        1.0
    } else {
        (2.0 * delta_log_modulus).exp()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Walker {
    pub config: ParticleConfiguration,
    pub log_psi: LogAmplitude,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub accepted: u64,
    pub proposed: u64,
    /// Proposals rejected because the amplitude could not be evaluated.
    pub singular: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn add(&mut self, o: &MoveStats) {
        self.accepted += o.accepted;
        self.proposed += o.proposed;
        self.singular += o.singular;
    }
}

/// Independent Markov chains sharing a frozen parameter snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkerEnsemble {
    pub walkers: Vec<Walker>,
    pub step_size: f64,
    pub moves: MoveKind,
    pub stats: MoveStats,
}

/// Per-walker stream derived from the master seed.
pub fn walker_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn evaluate_or_unset<W: Wavefunction + ?Sized>(wf: &W, config: &ParticleConfiguration) -> Result<LogAmplitude> {
    match wf.log_psi(config) {
        Ok(l) => Ok(l),
        Err(Error::Singular(_)) => Ok(LogAmplitude {
            log_modulus: f64::NEG_INFINITY,
            phase: 0.0,
        }),
        Err(e) => Err(e),
    }
}

impl WalkerEnsemble {
    /// Uniformly random starting configurations.
    pub fn new<W: Wavefunction + ?Sized>(wf: &W, n_walkers: usize, seed: u64, step_size: f64, moves: MoveKind) -> Result<Self> {
        let cell = wf.cell();
        let walkers = (0..n_walkers)
            .into_par_iter()
            .map(|w| {
                let mut rng = walker_rng(seed, w);
                for _ in 0..100 {
                    let config = ParticleConfiguration::random(cell, &mut rng);
                    match wf.log_psi(&config) {
                        Ok(log_psi) => return Ok(Walker { config, log_psi, rng }),
                        Err(Error::Singular(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                Err(Error::Numerical("could not find a configuration with non-zero amplitude".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            walkers,
            step_size,
            moves,
            stats: MoveStats::default(),
        })
    }

    /// Walkers placed at the given configurations.
    pub fn from_configs<W: Wavefunction + ?Sized>(wf: &W, configs: Vec<ParticleConfiguration>, seed: u64, step_size: f64, moves: MoveKind) -> Result<Self> {
        let walkers = configs
            .into_iter()
            .enumerate()
            .map(|(w, config)| {
                let log_psi = evaluate_or_unset(wf, &config)?;
                Ok(Walker {
                    config,
                    log_psi,
                    rng: walker_rng(seed, w),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            walkers,
            step_size,
            moves,
            stats: MoveStats::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.walkers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walkers.is_empty()
    }

    pub fn configs(&self) -> impl Iterator<Item = &ParticleConfiguration> {
        self.walkers.iter().map(|w| &w.config)
    }

    /// Recomputes cached amplitudes after a parameter change. A walker whose
    /// amplitude vanishes accepts its next move unconditionally.
    pub fn refresh<W: Wavefunction + ?Sized>(&mut self, wf: &W) -> Result<()> {
        self.walkers.par_iter_mut().try_for_each(|w| {
            w.log_psi = evaluate_or_unset(wf, &w.config)?;
            Ok(())
        })
    }

    /// One sweep for every walker; returns the statistics of this sweep.
    pub fn metropolis_sweep<W: Wavefunction + ?Sized>(&mut self, wf: &W) -> Result<MoveStats> {
        let sigma = self.step_size;
        let moves = self.moves;
        let per: Vec<MoveStats> = self
            .walkers
            .par_iter_mut()
            .map(|w| sweep_walker(wf, w, sigma, moves))
            .collect::<Result<Vec<_>>>()?;
        let mut total = MoveStats::default();
        for s in &per {
            total.add(s);
        }
        self.stats.add(&total);
        Ok(total)
    }

    /// `σ ← σ·exp(κ(rate − target))`, κ = 0.5, clamped to `[1e-4 L, 0.5 L]`.
    pub fn tune_step_size(&mut self, rate: f64, target: f64, cell: &SimulationCell) -> f64 {
        const KAPPA: f64 = 0.5;
        let l = cell.side();
        self.step_size = (self.step_size * (KAPPA * (rate - target)).exp()).clamp(1e-4 * l, 0.5 * l);
        self.step_size
    }

    /// Burn-in sweeps with step-size tuning after each sweep.
    pub fn burn_in<W: Wavefunction + ?Sized>(&mut self, wf: &W, sweeps: usize, target: f64) -> Result<f64> {
        let mut rate = 0.0;
        for _ in 0..sweeps {
            rate = self.metropolis_sweep(wf)?.rate();
            self.tune_step_size(rate, target, wf.cell());
        }
        Ok(rate)
    }
}

fn sweep_walker<W: Wavefunction + ?Sized>(wf: &W, w: &mut Walker, sigma: f64, moves: MoveKind) -> Result<MoveStats> {
    let cell = wf.cell();
    let n = w.config.n_particles();
    let mut st = MoveStats::default();
    let mut attempt = |w: &mut Walker, proposal: ParticleConfiguration| -> Result<()> {
        st.proposed += 1;
        let u: f64 = w.rng.gen();
        match wf.log_psi(&proposal) {
            Ok(lp) => {
                if u < acceptance_probability(lp.log_modulus - w.log_psi.log_modulus) {
                    w.config = proposal;
                    w.log_psi = lp;
                    st.accepted += 1;
                }
                Ok(())
            }
            Err(Error::Singular(_)) => {
                st.singular += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    };
    match moves {
        MoveKind::SingleParticle => {
            for i in 0..n {
                let r = w.config.position(i);
                let mut r2 = r;
                for c in &mut r2 {
                    *c += sigma * w.rng.sample::<f64, _>(StandardNormal);
                }
                let mut prop = w.config.clone();
                prop.set_position(i, r2, cell);
                attempt(w, prop)?;
            }
        }
        MoveKind::AllParticle => {
            let mut pos = w.config.positions().to_vec();
            for r in &mut pos {
                for c in r.iter_mut() {
                    *c += sigma * w.rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut prop = w.config.clone();
            prop.set_positions(&pos, cell);
            attempt(w, prop)?;
        }
    }
    Ok(st)
}
