//! Orchestration of the `vmc`, `dmc` and `measure` commands.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mpnqs::cell::{ParticleConfiguration, SimulationCell};
use mpnqs::dmc::{initial_configurations, optimize_jastrow, run_dmc as run_dmc_core, DmcEstimate, DmcPopulation, JastrowOptimization, SlaterJastrow};
use mpnqs::ewald::EwaldContext;
use mpnqs::observables::{BinnedValue, HistogramAccumulator, StructureFactorAccumulator};
use mpnqs::orbitals::OrbitalSet;
use mpnqs::sampler::{default_step_size, WalkerEnsemble};
use mpnqs::stats::{blocking, BlockingResult};
use mpnqs::vmc::{sample, sr_iteration};
use mpnqs::wavefunction::{MpNqs, Wavefunction};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{rng_from_words, rng_words, Checkpoint};
use crate::config::{ConfigError, ExperimentConfig, OrbitalChoice};

pub const ENERGY_TRACE: &str = "energy_trace.jsonl";
pub const DMC_TRACE: &str = "dmc_trace.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint written under a different configuration.
    pub force: bool,
}

impl RunOptions {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.output.directory = o.clone();
        }
    }
}

pub fn build_cell(cfg: &ExperimentConfig) -> mpnqs::Result<SimulationCell> {
    let (up, down) = cfg.system.spins();
    SimulationCell::new(up, down, cfg.system.r_s)
}

pub fn build_orbitals(cfg: &ExperimentConfig, cell: &SimulationCell) -> mpnqs::Result<OrbitalSet> {
    let s = &cfg.system;
    match s.orbitals {
        OrbitalChoice::PlaneWaves => {
            let o = OrbitalSet::plane_waves(cell, s.k_tot);
            if o.k_tot() != s.k_tot {
                log::warn!("open shell: total momentum {:?} instead of the requested {:?}", o.k_tot(), s.k_tot);
            }
            Ok(o)
        }
        OrbitalChoice::GaussianBcc => OrbitalSet::gaussian_bcc(cell, s.gaussian_alpha, s.image_cutoff),
    }
}

pub fn build_wavefunction(cfg: &ExperimentConfig) -> mpnqs::Result<MpNqs> {
    let cell = build_cell(cfg)?;
    let orbitals = build_orbitals(cfg, &cell)?;
    let mut wf = MpNqs::new(&cell, orbitals, &cfg.network)?;
    if cfg.system.bare_determinant {
        wf.zero_backflow_and_jastrow();
    }
    Ok(wf)
}

pub fn build_ewald(cfg: &ExperimentConfig, cell: &SimulationCell) -> mpnqs::Result<Option<EwaldContext>> {
    if cfg.system.interaction {
        EwaldContext::new(cell, cfg.system.ewald_tolerance).map(Some)
    } else {
        Ok(None)
    }
}

fn learning_rate(cfg: &ExperimentConfig) -> f64 {
    let (eta, fallback) = cfg.learning_rate();
    if fallback {
        log::warn!("r_s = {} is not tabulated; using the nearest tabulated learning rate {eta}", cfg.system.r_s);
    }
    eta
}

/// Appends JSON lines to a trace file.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Starts a fresh trace, or continues one keeping only records whose
    /// `key` is below `keep_below`.
    pub fn open(path: &Path, continue_from: Option<(&str, u64)>) -> Result<Self> {
        let kept = match continue_from {
            Some((key, below)) if path.exists() => {
                let f = BufReader::new(File::open(path)?);
                let mut kept = Vec::new();
                for line in f.lines() {
                    let line = line?;
                    let v: serde_json::Value = match serde_json::from_str(&line) {
                        Ok(v) => v,
                        Err(_) => continue,
                    };
                    if v.get(key).and_then(|x| x.as_u64()).is_some_and(|i| i < below) {
                        kept.push(line);
                    }
                }
                kept
            }
            _ => Vec::new(),
        };
        let mut out = BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(path).with_context(|| format!("opening {}", path.display()))?);
        for l in kept {
            writeln!(out, "{l}")?;
        }
        Ok(Self { out })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        writeln!(self.out)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_binned(path: &Path, header: [&str; 3], rows: &[BinnedValue]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&[r.x.to_string(), r.value.to_string(), r.error.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_state(dir: &Path, iteration: u64, cfg: &ExperimentConfig, wf: &MpNqs, ens: &WalkerEnsemble) -> Result<()> {
    let n = wf.cell().n_particles();
    let mut c = Checkpoint::new(iteration, cfg.hash());
    c.push_f64("params", &[wf.n_params()], wf.params().to_vec());
    let pos: Vec<f64> = ens.walkers.iter().flat_map(|w| w.config.positions().iter().flatten().copied()).collect();
    c.push_f64("walkers.positions", &[ens.len(), n, 3], pos);
    let rngs: Vec<u64> = ens.walkers.iter().flat_map(|w| rng_words(&w.rng)).collect();
    c.push_u64("walkers.rng", &[ens.len(), 7], rngs);
    c.push_f64("sampler.step_size", &[1], vec![ens.step_size]);
    c.save(dir)
}

/// Loads a checkpoint into `wf` and returns the restored ensemble and
/// iteration counter.
pub fn load_state(dir: &Path, cfg: &ExperimentConfig, wf: &mut MpNqs, force: bool) -> Result<(WalkerEnsemble, u64)> {
    let c = Checkpoint::load(dir)?;
    if c.config_hash != cfg.hash() {
        if force {
            log::warn!("checkpoint was written under a different configuration; continuing because of --force");
        } else {
            return Err(ConfigError::single(
                &dir.display().to_string(),
                "checkpoint was written under a different system/network/seed configuration (pass --force to use it anyway)",
            )
            .into());
        }
    }
    let (_, params) = c.f64s("params")?;
    wf.set_params(params).context("restoring parameters")?;
    let (shape, pos) = c.f64s("walkers.positions")?;
    let cell = wf.cell().clone();
    anyhow::ensure!(shape.len() == 3 && shape[1] == cell.n_particles() && shape[2] == 3, "walker array has shape {shape:?}");
    let configs = pos
        .chunks_exact(3 * shape[1])
        .map(|w| ParticleConfiguration::new(w.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect(), &cell))
        .collect::<mpnqs::Result<Vec<_>>>()?;
    let (_, step) = c.f64s("sampler.step_size")?;
    let mut ens = WalkerEnsemble::from_configs(&*wf, configs, cfg.seed, step[0], cfg.sampler.moves)?;
    let (_, rngs) = c.u64s("walkers.rng")?;
    for (w, words) in ens.walkers.iter_mut().zip(rngs.chunks_exact(7)) {
        w.rng = rng_from_words(words);
    }
    Ok((ens, c.iteration))
}

/// Energy per particle with its blocking error and the observables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Measurement {
    pub energy: BlockingResult,
    pub imaginary_energy: f64,
    pub g2: Vec<BinnedValue>,
    pub structure_factor: Vec<BinnedValue>,
    pub acceptance: f64,
}

pub fn measure<W: Wavefunction + ?Sized>(cfg: &ExperimentConfig, wf: &W, ens: &mut WalkerEnsemble, ewald: Option<&EwaldContext>) -> Result<Measurement> {
    let cell = wf.cell();
    let n = cell.n_particles() as f64;
    let obs = &cfg.observables;
    let mut g2 = HistogramAccumulator::new(cell, obs.g2_bins)?;
    let mut sk = StructureFactorAccumulator::new(cell, obs.k_max_index, obs.raw_structure_factor)?;
    let mut energies = Vec::with_capacity(obs.n_samples);
    let mut imag = Vec::with_capacity(obs.n_samples);
    let mut moves = mpnqs::sampler::MoveStats::default();
    for _ in 0..obs.n_samples {
        let set = sample(wf, ens, ewald, cfg.sampler.sweeps_per_sample, false)?;
        moves.add(&set.moves);
        energies.push(set.energy().0 / n);
        imag.push(set.acc.energies().iter().map(|e| e.im).sum::<f64>() / set.acc.len().max(1) as f64 / n);
        for c in ens.configs() {
            g2.accumulate(c, cell);
            sk.accumulate(c);
        }
    }
    Ok(Measurement {
        energy: blocking(&energies),
        imaginary_energy: mpnqs::stats::mean(&imag),
        g2: g2.normalize()?,
        structure_factor: sk.finalize()?,
        acceptance: moves.rate(),
    })
}

fn write_measurement(dir: &Path, m: &Measurement) -> Result<()> {
    write_binned(&dir.join("g2.csv"), ["r", "g", "g_err"], &m.g2)?;
    write_binned(&dir.join("sk.csv"), ["k", "S", "S_err"], &m.structure_factor)?;
    fs::write(dir.join("measurement.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VmcSummary {
    pub iterations: u64,
    pub final_step: Option<mpnqs::vmc::VmcStepReport>,
    pub measurement: Measurement,
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.directory.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    Ok(dir)
}

/// Optimize, checkpoint, then measure.
pub fn run_vmc(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<VmcSummary> {
    let dir = prepare_output(cfg)?;
    let mut wf = build_wavefunction(cfg)?;
    let cell = wf.cell().clone();
    let ewald = build_ewald(cfg, &cell)?;
    let eta = learning_rate(cfg);
    let sr = cfg.optimizer.sr();
    log::info!("N = {}, r_s = {}, {} parameters, η = {eta}", cell.n_particles(), cell.r_s(), wf.n_params());

    let (mut ens, start) = match &opts.resume {
        Some(path) => {
            let (ens, it) = load_state(path, cfg, &mut wf, opts.force)?;
            log::info!("resuming from {} at iteration {it}", path.display());
            (ens, it)
        }
        None => {
            let step = cfg.sampler.step_size.unwrap_or_else(|| default_step_size(&cell));
            let mut ens = WalkerEnsemble::new(&wf, cfg.sampler.n_walkers, cfg.seed, step, cfg.sampler.moves)?;
            let rate = ens.burn_in(&wf, cfg.sampler.burn_in, cfg.sampler.target_acceptance)?;
            log::info!("burn-in done: acceptance {rate:.3}, step size {:.4}", ens.step_size);
            (ens, 0)
        }
    };
    let mut trace = JsonlWriter::open(&dir.join(ENERGY_TRACE), opts.resume.as_ref().map(|_| ("iteration", start)))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let mut last = None;
    let steps = cfg.optimizer.steps as u64;
    for it in start..steps {
        let rep = sr_iteration(&mut wf, &mut ens, ewald.as_ref(), &sr, eta, cfg.sampler.sweeps_per_sample, it as usize)?;
        trace.write(&rep)?;
        if it % 10 == 0 {
            log::info!("iter {it}: E/N = {:.6} ± {:.6}, acc {:.3}, |F| = {:.3e}", rep.energy, rep.error, rep.acceptance, rep.force_norm);
        }
        last = Some(rep);
        if (it + 1) % cfg.optimizer.checkpoint_interval as u64 == 0 {
            save_state(&ckpt, it + 1, cfg, &wf, &ens)?;
        }
    }
    let iterations = steps.max(start);
    save_state(&ckpt, iterations, cfg, &wf, &ens)?;
    let measurement = measure(cfg, &wf, &mut ens, ewald.as_ref())?;
    write_measurement(&dir, &measurement)?;
    log::info!("final E/N = {:.6} ± {:.6} Ha", measurement.energy.mean, measurement.energy.error);
    let summary = VmcSummary {
        iterations,
        final_step: last,
        measurement,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Observables from a checkpoint without optimizing.
pub fn run_measure(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Measurement> {
    let dir = prepare_output(cfg)?;
    let mut wf = build_wavefunction(cfg)?;
    let ewald = build_ewald(cfg, &wf.cell().clone())?;
    let path = opts.resume.clone().unwrap_or_else(|| dir.join(CHECKPOINT_DIR));
    let (mut ens, _) = load_state(&path, cfg, &mut wf, opts.force)?;
    let m = measure(cfg, &wf, &mut ens, ewald.as_ref())?;
    write_measurement(&dir, &m)?;
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DmcSummary {
    pub jastrow: Option<JastrowOptimization>,
    pub estimate: DmcEstimate,
}

#[derive(Serialize)]
struct DmcTraceRow<'a> {
    #[serde(flatten)]
    report: &'a mpnqs::dmc::DmcStepReport,
    production: bool,
}

/// Slater-Jastrow trial optimization followed by fixed-node DMC.
pub fn run_dmc(cfg: &ExperimentConfig, _opts: &RunOptions) -> Result<DmcSummary> {
    let Some(dmc) = cfg.dmc.clone() else {
        return Err(ConfigError::single("configuration", "no trial state: the [dmc] section is missing").into());
    };
    let dir = prepare_output(cfg)?;
    let cell = build_cell(cfg)?;
    let orbitals = build_orbitals(cfg, &cell)?;
    let ewald = build_ewald(cfg, &cell)?;
    let mut trial = SlaterJastrow::new(&cell, orbitals, dmc.jastrow_terms)?;

    let step = cfg.sampler.step_size.unwrap_or_else(|| default_step_size(&cell));
    let mut ens = WalkerEnsemble::new(&trial, cfg.sampler.n_walkers, cfg.seed, step, cfg.sampler.moves)?;
    ens.burn_in(&trial, cfg.sampler.burn_in, cfg.sampler.target_acceptance)?;
    let jastrow = if dmc.jastrow_optimization_steps > 0 && trial.n_params() > 0 {
        let sr = mpnqs::sr::SrConfig {
            solver: mpnqs::sr::SrSolver::Dense,
            ..cfg.optimizer.sr()
        };
        let r = optimize_jastrow(&mut trial, &mut ens, ewald.as_ref(), &sr, dmc.jastrow_learning_rate, dmc.jastrow_optimization_steps, cfg.observables.n_samples.max(32))?;
        log::info!(
            "Jastrow: E/N {:.6} ± {:.6} → {:.6} ± {:.6}",
            r.baseline.0,
            r.baseline.1,
            r.optimized.0,
            r.optimized.1
        );
        fs::write(dir.join("jastrow.json"), serde_json::to_string_pretty(&r)?)?;
        Some(r)
    } else {
        None
    };

    let configs = initial_configurations(&trial, dmc.n_walkers, cfg.seed.wrapping_add(1), cfg.sampler.burn_in)?;
    let mut pop = DmcPopulation::new(&trial, configs, ewald.as_ref(), cfg.seed.wrapping_add(2))?;
    let mut trace = JsonlWriter::open(&dir.join(DMC_TRACE), None)?;
    let mut io_err = None;
    let estimate = run_dmc_core(&mut pop, &trial, &dmc, ewald.as_ref(), |rep, production| {
        if rep.step % 50 == 0 {
            log::info!("DMC step {}: E_mixed/N = {:.6}, E_growth/N = {:.6}", rep.step, rep.mixed_energy, rep.growth_energy);
        }
        if io_err.is_none() {
            if let Err(e) = trace.write(&DmcTraceRow { report: rep, production }) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log::info!(
        "DMC E/N: mixed {:.6} ± {:.6}, growth {:.6} ± {:.6}",
        estimate.mixed.mean,
        estimate.mixed.error,
        estimate.growth.mean,
        estimate.growth.error
    );
    let summary = DmcSummary { jastrow, estimate };
    fs::write(dir.join("dmc_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
