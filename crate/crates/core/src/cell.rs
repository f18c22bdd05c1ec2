//! Periodic cubic simulation cell and the periodic feature maps used by the
//! network inputs.
//!
//! All lengths are expressed in units of `r_s` (Bohr), so the cell side only
//! depends on the particle count: `L = (4πN/3)^(1/3)`. The density enters the
//! Hamiltonian exclusively through the kinetic and Coulomb prefactors.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed spin label of a particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    /// `+1` for up, `-1` for down.
    pub fn sign(self) -> f64 {
        match self {
            Spin::Up => 1.0,
            Spin::Down => -1.0,
        }
    }

    pub fn flipped(self) -> Spin {
        match self {
            Spin::Up => Spin::Down,
            Spin::Down => Spin::Up,
        }
    }
}

/// Cubic periodic box in `r_s`-scaled units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationCell {
    n_up: usize,
    n_down: usize,
    r_s: f64,
    side: f64,
}

impl SimulationCell {
    pub const DIM: usize = 3;

    pub fn new(n_up: usize, n_down: usize, r_s: f64) -> Result<Self> {
        let n = n_up + n_down;
        if n == 0 {
            return Err(Error::InvalidInput("cell needs at least one particle".into()));
        }
        if !(r_s.is_finite() && r_s > 0.0) {
            return Err(Error::InvalidInput(format!("r_s must be positive, got {r_s}")));
        }
        let side = (4.0 * PI * n as f64 / 3.0).cbrt();
        Ok(Self {
            n_up,
            n_down,
            r_s,
            side,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.n_up + self.n_down
    }

    pub fn n_up(&self) -> usize {
        self.n_up
    }

    pub fn n_down(&self) -> usize {
        self.n_down
    }

    pub fn r_s(&self) -> f64 {
        self.r_s
    }

    /// Side length `L` in scaled units.
    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(3)
    }

    /// Same geometry at a different density.
    pub fn with_r_s(&self, r_s: f64) -> Result<Self> {
        Self::new(self.n_up, self.n_down, r_s)
    }

    /// Spin labels in canonical order: all up spins first.
    pub fn spins(&self) -> Vec<Spin> {
        let mut s = vec![Spin::Up; self.n_up];
        s.extend(std::iter::repeat(Spin::Down).take(self.n_down));
        s
    }

    /// Wraps a single coordinate into `[0, L)`.
    pub fn wrap_coord(&self, x: f64) -> f64 {
        let l = self.side;
        let w = x - l * (x / l).floor();
        // floor can round so that w == l for tiny negative x
        if w >= l {
            0.0
        } else {
            w
        }
    }

    pub fn wrap(&self, r: [f64; 3]) -> [f64; 3] {
        [self.wrap_coord(r[0]), self.wrap_coord(r[1]), self.wrap_coord(r[2])]
    }

    /// Minimum-image reduction of a single component into `(-L/2, L/2]`.
    pub fn min_image_component(&self, d: f64) -> f64 {
        let l = self.side;
        let mut r = d - l * (d / l).round();
        if r <= -0.5 * l {
            r += l;
        } else if r > 0.5 * l {
            r -= l;
        }
        r
    }
}

/// Minimum-image displacement `a - b`, each component in `(-L/2, L/2]`.
pub fn min_image_displacement(a: [f64; 3], b: [f64; 3], cell: &SimulationCell) -> Result<[f64; 3]> {
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite position".into()));
    }
    Ok([
        cell.min_image_component(a[0] - b[0]),
        cell.min_image_component(a[1] - b[1]),
        cell.min_image_component(a[2] - b[2]),
    ])
}

/// `[sin(2πr/L), cos(2πr/L)]` component-wise.
pub fn fourier_features(r: [f64; 3], cell: &SimulationCell) -> [f64; 6] {
    let w = 2.0 * PI / cell.side();
    let (s0, c0) = (w * r[0]).sin_cos();
    let (s1, c1) = (w * r[1]).sin_cos();
    let (s2, c2) = (w * r[2]).sin_cos();
    [s0, s1, s2, c0, c1, c2]
}

/// Periodic stand-in for the pair distance: `‖sin(πr/L)‖`.
pub fn periodic_norm_surrogate(r: [f64; 3], cell: &SimulationCell) -> f64 {
    let w = PI / cell.side();
    r.iter().map(|x| (w * x).sin().powi(2)).sum::<f64>().sqrt()
}

/// Particle positions plus their fixed spins. Positions always lie in `[0, L)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfiguration {
    positions: Vec<[f64; 3]>,
    spins: Vec<Spin>,
}

impl ParticleConfiguration {
    /// Builds a configuration with the cell's canonical spin ordering.
    pub fn new(positions: Vec<[f64; 3]>, cell: &SimulationCell) -> Result<Self> {
        Self::with_spins(positions, cell.spins(), cell)
    }

    pub fn with_spins(positions: Vec<[f64; 3]>, spins: Vec<Spin>, cell: &SimulationCell) -> Result<Self> {
        if positions.len() != cell.n_particles() || spins.len() != cell.n_particles() {
            return Err(Error::InvalidInput(format!(
                "expected {} particles, got {} positions and {} spins",
                cell.n_particles(),
                positions.len(),
                spins.len()
            )));
        }
        let n_up = spins.iter().filter(|s| **s == Spin::Up).count();
        if n_up != cell.n_up() {
            return Err(Error::InvalidInput(format!(
                "spin multiset has {n_up} up spins, cell expects {}",
                cell.n_up()
            )));
        }
        if positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite position".into()));
        }
        let positions = positions.into_iter().map(|r| cell.wrap(r)).collect();
        Ok(Self { positions, spins })
    }

    /// Uniformly random positions in the cell.
    pub fn random<R: Rng + ?Sized>(cell: &SimulationCell, rng: &mut R) -> Self {
        let l = cell.side();
        let positions = (0..cell.n_particles())
            .map(|_| [rng.gen::<f64>() * l, rng.gen::<f64>() * l, rng.gen::<f64>() * l])
            .collect();
        Self {
            positions,
            spins: cell.spins(),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    /// Moves particle `i` and re-wraps it into the cell.
    pub fn set_position(&mut self, i: usize, r: [f64; 3], cell: &SimulationCell) {
        self.positions[i] = cell.wrap(r);
    }

    /// Replaces all positions (re-wrapped); spins are untouched.
    pub fn set_positions(&mut self, positions: &[[f64; 3]], cell: &SimulationCell) {
        assert_eq!(positions.len(), self.positions.len());
        for (dst, src) in self.positions.iter_mut().zip(positions) {
            *dst = cell.wrap(*src);
        }
    }

    /// Rigid translation of all particles.
    pub fn translated(&self, t: [f64; 3], cell: &SimulationCell) -> Self {
        let positions = self
            .positions
            .iter()
            .map(|r| cell.wrap([r[0] + t[0], r[1] + t[1], r[2] + t[2]]))
            .collect();
        Self {
            positions,
            spins: self.spins.clone(),
        }
    }

    /// Exchanges the positions of particles `i` and `j` (spins stay with the slot).
    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.positions.swap(i, j);
        out
    }

    /// Minimum-image `r_i - r_j`.
    pub fn displacement(&self, i: usize, j: usize, cell: &SimulationCell) -> [f64; 3] {
        let a = self.positions[i];
        let b = self.positions[j];
        [
            cell.min_image_component(a[0] - b[0]),
            cell.min_image_component(a[1] - b[1]),
            cell.min_image_component(a[2] - b[2]),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell14() -> SimulationCell {
        SimulationCell::new(7, 7, 1.0).unwrap()
    }

    #[test]
    fn side_length_gives_unit_scaled_density() {
        let cell = cell14();
        let expected = (4.0 * PI * 14.0 / 3.0).cbrt();
        assert!((cell.side() - expected).abs() < 1e-14);
        assert!((cell.volume() - 4.0 * PI * 14.0 / 3.0).abs() < 1e-10);
        // independent of r_s
        assert_eq!(cell.side(), cell.with_r_s(5.0).unwrap().side());
    }

    #[test]
    fn min_image_examples() {
        let cell = cell14();
        let l = cell.side();
        let a = [0.3, 1.2, 2.0];
        assert_eq!(min_image_displacement(a, a, &cell).unwrap(), [0.0, 0.0, 0.0]);
        let d = min_image_displacement([0.9 * l, 0.0, 0.0], [0.1 * l, 0.0, 0.0], &cell).unwrap();
        assert!((d[0] + 0.2 * l).abs() < 1e-12);
        // tie goes to +L/2
        let d = min_image_displacement([0.5 * l, 0.0, 0.0], [0.0, 0.0, 0.0], &cell).unwrap();
        assert_eq!(d[0], 0.5 * l);
        let d = min_image_displacement([0.0, 0.0, 0.0], [0.5 * l, 0.0, 0.0], &cell).unwrap();
        assert_eq!(d[0], 0.5 * l);
        assert!(min_image_displacement([f64::NAN, 0.0, 0.0], a, &cell).is_err());
    }

    #[test]
    fn fourier_and_surrogate_examples() {
        let cell = cell14();
        let l = cell.side();
        let f = fourier_features([0.0; 3], &cell);
        assert_eq!(f, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = fourier_features([l / 4.0, 0.0, 0.0], &cell);
        let want = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        for k in 0..6 {
            assert!((f[k] - want[k]).abs() < 1e-15);
        }
        assert_eq!(periodic_norm_surrogate([0.0; 3], &cell), 0.0);
        assert!((periodic_norm_surrogate([l / 2.0, 0.0, 0.0], &cell) - 1.0).abs() < 1e-15);
        assert!((periodic_norm_surrogate([l / 2.0; 3], &cell) - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn configuration_rejects_wrong_spin_multiset() {
        let cell = cell14();
        let pos = vec![[0.0; 3]; 14];
        let spins = vec![Spin::Up; 14];
        assert!(ParticleConfiguration::with_spins(pos.clone(), spins, &cell).is_err());
        assert!(ParticleConfiguration::new(pos[..13].to_vec(), &cell).is_err());
        let c = ParticleConfiguration::new(vec![[-0.1, 100.0, 3.0]; 14], &cell).unwrap();
        for r in c.positions() {
            assert!(r.iter().all(|x| (0.0..cell.side()).contains(x)));
        }
    }

    proptest! {
        #[test]
        fn min_image_lies_in_half_open_interval(
            a in prop::array::uniform3(-20.0f64..20.0),
            b in prop::array::uniform3(-20.0f64..20.0),
        ) {
            let cell = cell14();
            let l = cell.side();
            let d = min_image_displacement(a, b, &cell).unwrap();
            // oracle: scan lattice translations of b for the shortest image per axis
            for k in 0..3 {
                prop_assert!(d[k] > -0.5 * l - 1e-12 && d[k] <= 0.5 * l + 1e-12);
                let best = (-10..=10)
                    .map(|n| a[k] - b[k] - n as f64 * l)
                    .fold(f64::INFINITY, |acc: f64, x| if x.abs() < acc.abs() { x } else { acc });
                prop_assert!((d[k].abs() - best.abs()).abs() < 1e-9);
            }
            let back = min_image_displacement(b, a, &cell).unwrap();
            for k in 0..3 {
                if (d[k].abs() - 0.5 * l).abs() > 1e-9 {
                    prop_assert!((d[k] + back[k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn feature_maps_are_periodic(
            r in prop::array::uniform3(-10.0f64..10.0),
            n in prop::array::uniform3(-3i32..=3),
        ) {
            let cell = cell14();
            let l = cell.side();
            let shifted = [r[0] + n[0] as f64 * l, r[1] + n[1] as f64 * l, r[2] + n[2] as f64 * l];
            let f0 = fourier_features(r, &cell);
            let f1 = fourier_features(shifted, &cell);
            for k in 0..6 {
                prop_assert!((f0[k] - f1[k]).abs() < 1e-12);
            }
            let s0 = periodic_norm_surrogate(r, &cell);
            prop_assert!((s0 - periodic_norm_surrogate(shifted, &cell)).abs() < 1e-12);
            prop_assert!((s0 - periodic_norm_surrogate([-r[0], -r[1], -r[2]], &cell)).abs() < 1e-15);
            prop_assert!((0.0..=3f64.sqrt() + 1e-15).contains(&s0));
        }
    }
}
