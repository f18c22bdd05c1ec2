//! Reference single-particle spin-orbitals: plane waves filled shell by shell,
//! and periodized Gaussians centred on BCC lattice sites. Both are entire
//! functions of the coordinates and are evaluated at complex backflow
//! positions.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cell::{SimulationCell, Spin};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrbitalKind {
    PlaneWave,
    GaussianBcc,
}

/// Quantum numbers of one spin-orbital.
#[derive(Clone, Debug, PartialEq)]
pub enum OrbitalLabel {
    /// `k = 2π n / L`.
    PlaneWave { n: [i32; 3] },
    /// Lattice site in scaled units.
    Gaussian { site: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Orbital {
    pub spin: Spin,
    pub label: OrbitalLabel,
}

/// Integer vectors sorted by `|n|²`, lexicographic within a shell.
#[derive(Clone, Debug)]
pub struct ShellFilling {
    shells: Vec<Vec<[i32; 3]>>,
}

impl ShellFilling {
    /// All integer vectors with `|n|² ≤ max_norm2`, grouped into shells.
    pub fn enumerate(max_norm2: i32) -> Self {
        let m = (max_norm2 as f64).sqrt().floor() as i32;
        let mut all = Vec::new();
        for x in -m..=m {
            for y in -m..=m {
                for z in -m..=m {
                    let n2 = x * x + y * y + z * z;
                    if n2 <= max_norm2 {
                        all.push((n2, [x, y, z]));
                    }
                }
            }
        }
        all.sort();
        let mut shells: Vec<Vec<[i32; 3]>> = Vec::new();
        let mut last = -1;
        for (n2, v) in all {
            if n2 != last {
                shells.push(Vec::new());
                last = n2;
            }
            shells.last_mut().unwrap().push(v);
        }
        Self { shells }
    }

    pub fn shells(&self) -> &[Vec<[i32; 3]>] {
        &self.shells
    }

    /// Flattened ordering.
    pub fn ordered(&self) -> Vec<[i32; 3]> {
        self.shells.iter().flatten().copied().collect()
    }

    /// Lowest-`|k|²` selection of `count` vectors. A partially filled last
    /// shell is completed with the lexicographically first subset that brings
    /// the total momentum closest to `target`.
    pub fn select(&self, count: usize, target: [i32; 3]) -> Vec<[i32; 3]> {
        let mut chosen = Vec::with_capacity(count);
        for shell in &self.shells {
            let need = count - chosen.len();
            if need == 0 {
                break;
            }
            if shell.len() <= need {
                chosen.extend_from_slice(shell);
                continue;
            }
            let base = sum_vectors(&chosen);
            let rest = [target[0] - base[0], target[1] - base[1], target[2] - base[2]];
            chosen.extend(best_subset(shell, need, rest));
            break;
        }
        chosen
    }
}

fn sum_vectors(v: &[[i32; 3]]) -> [i32; 3] {
    v.iter().fold([0, 0, 0], |a, n| [a[0] + n[0], a[1] + n[1], a[2] + n[2]])
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// First subset of size `k` in lexicographic index order minimizing
/// `|Σ − target|²`.
fn best_subset(shell: &[[i32; 3]], k: usize, target: [i32; 3]) -> Vec<[i32; 3]> {
    let dist = |s: [i32; 3]| {
        let d = [s[0] - target[0], s[1] - target[1], s[2] - target[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    };
    if binomial(shell.len(), k) > 5e6 {
        // too many subsets to scan: greedy pick, lexicographic on ties
        let mut picked: Vec<usize> = Vec::new();
        let mut acc = [0, 0, 0];
        for _ in 0..k {
            let (idx, _) = shell
                .iter()
                .enumerate()
                .filter(|(i, _)| !picked.contains(i))
                .map(|(i, v)| (i, dist([acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]])))
                .min_by_key(|&(i, d)| (d, i))
                .unwrap();
            picked.push(idx);
            let v = shell[idx];
            acc = [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]];
        }
        picked.sort_unstable();
        return picked.into_iter().map(|i| shell[i]).collect();
    }
    let n = shell.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best: Option<(i32, Vec<usize>)> = None;
    loop {
        let s = idx.iter().fold([0, 0, 0], |a, &i| {
            [a[0] + shell[i][0], a[1] + shell[i][1], a[2] + shell[i][2]]
        });
        let d = dist(s);
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, idx.clone()));
            if d == 0 {
                break;
            }
        }
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                let (_, b) = best.unwrap();
                return b.into_iter().map(|i| shell[i]).collect();
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    let (_, b) = best.unwrap();
    b.into_iter().map(|i| shell[i]).collect()
}

/// Conventional BCC sites (corners then body centres) tiling the cube with
/// `N = 2 m³` sites.
pub fn bcc_sites(cell: &SimulationCell) -> Result<Vec<[f64; 3]>> {
    let n = cell.n_particles();
    let m = bcc_cells_per_side(n).ok_or_else(|| {
        Error::Config(format!(
            "N = {n} cannot fill a cubic BCC supercell; N must equal 2·m³ (2, 16, 54, 128, 250, ...)"
        ))
    })?;
    let a = cell.side() / m as f64;
    let mut corners = Vec::with_capacity(n / 2);
    let mut centres = Vec::with_capacity(n / 2);
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                corners.push([i as f64 * a, j as f64 * a, k as f64 * a]);
                centres.push([(i as f64 + 0.5) * a, (j as f64 + 0.5) * a, (k as f64 + 0.5) * a]);
            }
        }
    }
    corners.extend(centres);
    Ok(corners)
}

fn bcc_cells_per_side(n: usize) -> Option<usize> {
    if n % 2 != 0 {
        return None;
    }
    let half = n / 2;
    let m = (half as f64).cbrt().round() as usize;
    (m > 0 && m * m * m == half).then_some(m)
}

/// Value, gradient and Hessian (upper triangle: xx, yy, zz, xy, xz, yz) of an
/// orbital with respect to the complex coordinate, plus `∂/∂α`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OrbitalJet {
    pub value: Complex64,
    pub grad: [Complex64; 3],
    pub hess: [Complex64; 6],
    pub d_alpha: Complex64,
}

/// Hessian index pairs in the packed layout used by [`OrbitalJet`].
pub const HESS_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Set of occupied spin-orbitals for one simulation cell.
#[derive(Clone, Debug)]
pub struct OrbitalSet {
    kind: OrbitalKind,
    up: Vec<Orbital>,
    down: Vec<Orbital>,
    alpha: f64,
    image_cutoff: i32,
    side: f64,
    k_tot: [i32; 3],
    images: Vec<[f64; 3]>,
}

impl OrbitalSet {
    /// Plane waves filled per spin species, total momentum as close to
    /// `k_tot_target` (in units of 2π/L) as the shells allow.
    pub fn plane_waves(cell: &SimulationCell, k_tot_target: [i32; 3]) -> Self {
        let nmax = cell.n_up().max(cell.n_down());
        let mut r2 = 1;
        let filling = loop {
            let f = ShellFilling::enumerate(r2);
            if f.ordered().len() >= nmax + 64 {
                break f;
            }
            r2 += 2;
        };
        let mk = |spin: Spin, count: usize, target: [i32; 3]| -> Vec<Orbital> {
            filling
                .select(count, target)
                .into_iter()
                .map(|n| Orbital {
                    spin,
                    label: OrbitalLabel::PlaneWave { n },
                })
                .collect()
        };
        let up = mk(Spin::Up, cell.n_up(), k_tot_target);
        let down = mk(Spin::Down, cell.n_down(), [0, 0, 0]);
        let k_tot = up
            .iter()
            .chain(down.iter())
            .fold([0, 0, 0], |a, o| match o.label {
                OrbitalLabel::PlaneWave { n } => [a[0] + n[0], a[1] + n[1], a[2] + n[2]],
                OrbitalLabel::Gaussian { .. } => a,
            });
        Self {
            kind: OrbitalKind::PlaneWave,
            up,
            down,
            alpha: 0.0,
            image_cutoff: 0,
            side: cell.side(),
            k_tot,
            images: vec![[0.0; 3]],
        }
    }

    /// Gaussians on BCC sites. Fully polarized cells occupy every site with
    /// up spins; unpolarized cells put up spins on corners and down spins on
    /// body centres.
    ///
    /// Without an explicit `alpha` the width follows the zero-point motion of
    /// an Einstein oscillator at the plasma frequency over √3, giving
    /// `alpha = √r_s / 2` in scaled units, floored at `2 / spacing²`.
    pub fn gaussian_bcc(cell: &SimulationCell, alpha: Option<f64>, image_cutoff: i32) -> Result<Self> {
        let sites = bcc_sites(cell)?;
        let n = cell.n_particles();
        let m = bcc_cells_per_side(n).unwrap();
        let half = n / 2;
        let (up_sites, down_sites): (Vec<[f64; 3]>, Vec<[f64; 3]>) = if cell.n_down() == 0 {
            (sites, Vec::new())
        } else if cell.n_up() == half && cell.n_down() == half {
            (sites[..half].to_vec(), sites[half..].to_vec())
        } else {
            return Err(Error::Config(format!(
                "BCC Gaussian orbitals need a fully polarized or balanced cell, got {} up / {} down",
                cell.n_up(),
                cell.n_down()
            )));
        };
        if image_cutoff < 0 {
            return Err(Error::Config("image_cutoff must be non-negative".into()));
        }
        let spacing = cell.side() / m as f64;
        let alpha = alpha.unwrap_or_else(|| (0.5 * cell.r_s().sqrt()).max(2.0 / (spacing * spacing)));
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("Gaussian alpha must be positive, got {alpha}")));
        }
        let mk = |spin: Spin, s: Vec<[f64; 3]>| -> Vec<Orbital> {
            s.into_iter()
                .map(|site| Orbital {
                    spin,
                    label: OrbitalLabel::Gaussian { site },
                })
                .collect()
        };
        let mut images = Vec::new();
        for a in -image_cutoff..=image_cutoff {
            for b in -image_cutoff..=image_cutoff {
                for c in -image_cutoff..=image_cutoff {
                    images.push([a as f64, b as f64, c as f64]);
                }
            }
        }
        Ok(Self {
            kind: OrbitalKind::GaussianBcc,
            up: mk(Spin::Up, up_sites),
            down: mk(Spin::Down, down_sites),
            alpha,
            image_cutoff,
            side: cell.side(),
            k_tot: [0, 0, 0],
            images,
        })
    }

    pub fn kind(&self) -> OrbitalKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Copy with a different Gaussian width.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.alpha = alpha;
        out
    }

    pub fn image_cutoff(&self) -> i32 {
        self.image_cutoff
    }

    /// Achieved total momentum in units of 2π/L.
    pub fn k_tot(&self) -> [i32; 3] {
        self.k_tot
    }

    pub fn orbitals(&self, spin: Spin) -> &[Orbital] {
        match spin {
            Spin::Up => &self.up,
            Spin::Down => &self.down,
        }
    }

    /// All orbitals, up block first.
    pub fn all(&self) -> impl Iterator<Item = &Orbital> {
        self.up.iter().chain(self.down.iter())
    }

    pub fn len(&self) -> usize {
        self.up.len() + self.down.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encoding of the quantum numbers fed to the orbital factor network:
    /// three integers `n` (plane waves) or fractional site coordinates
    /// (Gaussians), followed by the spin sign.
    pub fn encoding(&self, orb: &Orbital) -> [f64; 4] {
        let s = orb.spin.sign();
        match &orb.label {
            OrbitalLabel::PlaneWave { n } => [n[0] as f64, n[1] as f64, n[2] as f64, s],
            OrbitalLabel::Gaussian { site } => [site[0] / self.side, site[1] / self.side, site[2] / self.side, s],
        }
    }

    /// Squared momentum of a plane-wave orbital in scaled units.
    pub fn k_squared(&self, orb: &Orbital) -> f64 {
        match orb.label {
            OrbitalLabel::PlaneWave { n } => {
                let ku = 2.0 * PI / self.side;
                ku * ku * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) as f64
            }
            OrbitalLabel::Gaussian { .. } => f64::NAN,
        }
    }

    /// Orbital value at a complex position.
    pub fn value(&self, orb: &Orbital, y: [Complex64; 3]) -> Complex64 {
        match &orb.label {
            OrbitalLabel::PlaneWave { n } => {
                let ku = 2.0 * PI / self.side;
                let phase = (y[0] * n[0] as f64 + y[1] * n[1] as f64 + y[2] * n[2] as f64) * ku;
                (Complex64::i() * phase).exp()
            }
            OrbitalLabel::Gaussian { site } => {
                let mut sum = Complex64::new(0.0, 0.0);
                for img in &self.images {
                    let d = self.gauss_offset(y, site, img);
                    sum += (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) * self.alpha).exp();
                }
                sum
            }
        }
    }

    /// `y − R + n L`, with the real part of `y − R` first reduced to the
    /// minimum image so the truncated image sum is centred on the nearest copy.
    #[inline]
    fn gauss_offset(&self, y: [Complex64; 3], site: &[f64; 3], img: &[f64; 3]) -> [Complex64; 3] {
        let l = self.side;
        let mut d = [Complex64::new(0.0, 0.0); 3];
        for c in 0..3 {
            let base = y[c] - site[c];
            d[c] = base - l * (base.re / l).round() + img[c] * l;
        }
        d
    }

    /// Value and complex derivatives up to second order.
    pub fn jet(&self, orb: &Orbital, y: [Complex64; 3]) -> OrbitalJet {
        match &orb.label {
            OrbitalLabel::PlaneWave { n } => {
                let ku = 2.0 * PI / self.side;
                let k = [n[0] as f64 * ku, n[1] as f64 * ku, n[2] as f64 * ku];
                let v = (Complex64::i() * (y[0] * k[0] + y[1] * k[1] + y[2] * k[2])).exp();
                let iv = Complex64::i() * v;
                let mut jet = OrbitalJet {
                    value: v,
                    grad: [iv * k[0], iv * k[1], iv * k[2]],
                    ..Default::default()
                };
                for (slot, &(a, b)) in HESS_PAIRS.iter().enumerate() {
                    jet.hess[slot] = -v * (k[a] * k[b]);
                }
                jet
            }
            OrbitalLabel::Gaussian { site } => {
                let a = self.alpha;
                let mut jet = OrbitalJet::default();
                for img in &self.images {
                    let d = self.gauss_offset(y, site, img);
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let e = (-d2 * a).exp();
                    jet.value += e;
                    for c in 0..3 {
                        jet.grad[c] += e * d[c] * (-2.0 * a);
                    }
                    for (slot, &(p, q)) in HESS_PAIRS.iter().enumerate() {
                        let delta = if p == q { 2.0 * a } else { 0.0 };
                        jet.hess[slot] += e * (d[p] * d[q] * (4.0 * a * a) - delta);
                    }
                    jet.d_alpha += -d2 * e;
                }
                jet
            }
        }
    }
}

/// Full `N×N` matrix `φ_μ(y_i, s_i)` with columns ordered up block first.
/// Entries with mismatched spins are exactly zero.
pub fn evaluate_orbital_matrix(orbitals: &OrbitalSet, y: &[[Complex64; 3]], spins: &[Spin]) -> Result<CMatrix> {
    let n = y.len();
    if spins.len() != n || orbitals.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} coordinates, {} spins, {} orbitals",
            n,
            spins.len(),
            orbitals.len()
        )));
    }
    let n_up = spins.iter().filter(|s| **s == Spin::Up).count();
    if n_up != orbitals.orbitals(Spin::Up).len() {
        return Err(Error::InvalidInput(format!(
            "{} up spins but {} up orbitals",
            n_up,
            orbitals.orbitals(Spin::Up).len()
        )));
    }
    if y.iter().flatten().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    let mut m = CMatrix::zeros(n);
    for (i, (yi, si)) in y.iter().zip(spins).enumerate() {
        for (mu, orb) in orbitals.all().enumerate() {
            if orb.spin == *si {
                m.set(i, mu, orbitals.value(orb, *yi));
            }
        }
    }
    Ok(m)
}
