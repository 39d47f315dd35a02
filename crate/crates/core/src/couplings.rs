//! Dipole-dipole couplings J (coherent) and Γ (dissipative).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::EmitterArray;
use crate::{C64, K0};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    FreeSpace,
    Waveguide1d,
    /// All-to-all Γ = γ₀ with no coherent part.
    Dicke,
    Independent,
}

impl Environment {
    pub fn name(self) -> &'static str {
        match self {
            Environment::FreeSpace => "free_space",
            Environment::Waveguide1d => "waveguide_1d",
            Environment::Dicke => "dicke",
            Environment::Independent => "independent",
        }
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Environment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "free_space" | "free-space" | "freespace" => Ok(Environment::FreeSpace),
            "waveguide_1d" | "waveguide" => Ok(Environment::Waveguide1d),
            "dicke" => Ok(Environment::Dicke),
            "independent" => Ok(Environment::Independent),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrices {
    pub j: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub gamma0: f64,
    pub environment: Environment,
}

impl CouplingMatrices {
    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.nrows() == 0
    }

    /// Builds couplings from explicit matrices; used by tests and bindings.
    pub fn from_parts(
        j: DMatrix<f64>,
        gamma: DMatrix<f64>,
        environment: Environment,
    ) -> Result<Self> {
        if j.shape() != gamma.shape() || !gamma.is_square() {
            return Err(Error::Dimension(format!(
                "J {:?} vs Gamma {:?}",
                j.shape(),
                gamma.shape()
            )));
        }
        Ok(CouplingMatrices {
            j,
            gamma,
            gamma0: 1.0,
            environment,
        })
    }

    /// CSV dump: row,col,gamma,j.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,col,gamma,j")?;
        let n = self.len();
        for r in 0..n {
            for c in 0..n {
                writeln!(
                    w,
                    "{r},{c},{:.16e},{:.16e}",
                    self.gamma[(r, c)],
                    self.j[(r, c)]
                )?;
            }
        }
        Ok(())
    }
}

/// Free-space dyadic Green tensor at separation `r` (units of λ₀).
pub fn green_tensor(r: &Vector3<f64>) -> Result<Matrix3<C64>> {
    let d = r.norm();
    if !(d > 0.0) {
        return Err(Error::SingularSeparation(d));
    }
    let k = K0;
    let kr = k * d;
    let pre = C64::from_polar(1.0, kr) / (4.0 * std::f64::consts::PI * k * k * d * d * d);
    let diag = pre * C64::new(kr * kr - 1.0, kr);
    let radial = pre * C64::new(3.0 - kr * kr, -3.0 * kr);
    let u = r / d;
    Ok(Matrix3::from_fn(|i, j| {
        let mut v = radial * (u[i] * u[j]);
        if i == j {
            v += diag;
        }
        v
    }))
}

/// d†·G(r)·d
pub fn project(g: &Matrix3<C64>, d: &[C64; 3]) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            acc += d[i].conj() * g[(i, j)] * d[j];
        }
    }
    acc
}

pub fn coupling_matrices(
    array: &EmitterArray,
    environment: Environment,
) -> Result<CouplingMatrices> {
    let n = array.len();
    let gamma0 = 1.0;
    let mut j = DMatrix::<f64>::zeros(n, n);
    let mut gamma = DMatrix::<f64>::zeros(n, n);
    match environment {
        Environment::Independent => {
            gamma.fill_diagonal(gamma0);
        }
        Environment::Dicke => {
            gamma.fill(gamma0);
        }
        Environment::Waveguide1d => {
            if !array.kind.is_linear() {
                return Err(Error::Incompatible {
                    env: environment.to_string(),
                    geometry: array.kind.to_string(),
                });
            }
            for a in 0..n {
                for b in 0..n {
                    if a == b {
                        gamma[(a, b)] = gamma0;
                        continue;
                    }
                    let phase = K0 * (array.positions[a].x - array.positions[b].x).abs();
                    gamma[(a, b)] = gamma0 * phase.cos();
                    j[(a, b)] = -0.5 * gamma0 * phase.sin();
                }
            }
        }
        Environment::FreeSpace => {
            let d = array.polarization;
            let pre = -3.0 * std::f64::consts::PI * gamma0 / K0;
            let rows: Vec<Vec<(f64, f64)>> = (0..n)
                .into_par_iter()
                .map(|a| {
                    (0..n)
                        .map(|b| {
                            if a == b {
                                return Ok((0.0, gamma0));
                            }
                            let g = green_tensor(&(array.positions[a] - array.positions[b]))?;
                            let c = pre * project(&g, &d);
                            Ok((c.re, -2.0 * c.im))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            for (a, row) in rows.iter().enumerate() {
                for (b, &(jv, gv)) in row.iter().enumerate() {
                    j[(a, b)] = jv;
                    gamma[(a, b)] = gv;
                }
            }
            // d†Gd is symmetric only up to the conjugation of d; average out
            // the last-bit asymmetry so Γ and J are exactly symmetric.
            for a in 0..n {
                for b in (a + 1)..n {
                    let gs = 0.5 * (gamma[(a, b)] + gamma[(b, a)]);
                    let js = 0.5 * (j[(a, b)] + j[(b, a)]);
                    gamma[(a, b)] = gs;
                    gamma[(b, a)] = gs;
                    j[(a, b)] = js;
                    j[(b, a)] = js;
                }
            }
        }
    }
    Ok(CouplingMatrices {
        j,
        gamma,
        gamma0,
        environment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_array, Geometry, Polarization};
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    // High-precision evaluation of the closed form (40 digits), frozen.
    const GAMMA12_X015: f64 = 0.87228166306149710223;
    const J12_X015: f64 = -0.83870765623449869792;
    const GAMMA12_X037: f64 = 0.37368234595389878482;
    const J12_X037: f64 = 0.080272571647984405959;
    const IMG_X015: f64 = 0.29076055435383236741;
    const GAMMA12_Z015: f64 = 0.83061774787942512058;
    const J12_Z015: f64 = 0.74192602868035836263;

    /// Separate scalar path: Im and Re of d†Gd from the sin/cos split, with
    /// |r̂·d|² supplied directly.
    fn scalar_pair(r: f64, rd2: f64) -> (f64, f64) {
        let k = 2.0 * std::f64::consts::PI;
        let x = k * r;
        let (s, c) = x.sin_cos();
        let den = 4.0 * std::f64::consts::PI * k * k * r * r * r;
        let im = ((x * x - 1.0) * s + x * c + rd2 * ((3.0 - x * x) * s - 3.0 * x * c)) / den;
        let re = ((x * x - 1.0) * c - x * s + rd2 * ((3.0 - x * x) * c + 3.0 * x * s)) / den;
        (re, im)
    }

    #[test]
    fn im_g_matches_high_precision_value() {
        let g = green_tensor(&Vector3::new(0.15, 0.0, 0.0)).unwrap();
        let v = project(&g, &Polarization::Circular.vector());
        assert!((v.im - IMG_X015).abs() < 1e-14, "{}", v.im);
        let (_, im) = scalar_pair(0.15, 0.5);
        assert!((im - IMG_X015).abs() < 1e-14);
    }

    #[test]
    fn two_emitter_couplings() {
        let d = Polarization::Circular.vector();
        for (a, gam, jj) in [
            (0.15, GAMMA12_X015, J12_X015),
            (0.37, GAMMA12_X037, J12_X037),
        ] {
            let arr = build_array(Geometry::Chain, 2, a, d).unwrap();
            let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
            assert!((c.gamma[(0, 1)] - gam).abs() < 1e-13, "{}", c.gamma[(0, 1)]);
            assert!((c.j[(0, 1)] - jj).abs() < 1e-13, "{}", c.j[(0, 1)]);
            assert_eq!(c.gamma[(0, 0)], 1.0);
            assert_eq!(c.j[(1, 1)], 0.0);
            let (re, im) = scalar_pair(a, 0.5);
            let pre = -3.0 * std::f64::consts::PI / K0;
            assert!((pre * re - jj).abs() < 1e-13);
            assert!((-2.0 * pre * im - gam).abs() < 1e-13);
        }
    }

    #[test]
    fn separation_along_dipole_axis_normal() {
        // separation along z is perpendicular to the circular dipole plane
        let d = Polarization::Circular.vector();
        let g = green_tensor(&Vector3::new(0.0, 0.0, 0.15)).unwrap();
        let c = -3.0 * std::f64::consts::PI / K0 * project(&g, &d);
        assert!((c.re - J12_Z015).abs() < 1e-13);
        assert!((-2.0 * c.im - GAMMA12_Z015).abs() < 1e-13);
    }

    #[test]
    fn self_term_limit_is_unit_rate() {
        // Im d†Gd → k/6π at small separation, i.e. Γ → γ₀
        let d = Polarization::Circular.vector();
        let g = green_tensor(&Vector3::new(1e-4, 0.0, 0.0)).unwrap();
        let gam = 2.0 * 3.0 * std::f64::consts::PI / K0 * project(&g, &d).im;
        assert!((gam - 1.0).abs() < 1e-6);
    }

    #[test]
    fn green_far_field_and_parity() {
        let r = Vector3::new(30.0, 40.0, 0.0);
        let g = green_tensor(&r).unwrap();
        let gm = green_tensor(&-r).unwrap();
        assert_eq!(g, gm);
        assert!((g - g.transpose()).norm() < 1e-18);
        // transverse part ~ 1/(4πr), longitudinal part suppressed
        let d = r.norm();
        let u = r / d;
        let t = Vector3::new(-u.y, u.x, 0.0);
        let gtt: C64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| g[(i, j)] * t[i] * t[j])
            .sum();
        let guu: C64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| g[(i, j)] * u[i] * u[j])
            .sum();
        let far = 1.0 / (4.0 * std::f64::consts::PI * d);
        assert!((gtt.norm() - far).abs() / far < 1e-3);
        assert!(guu.norm() / far < 1e-2);
        assert!(green_tensor(&Vector3::zeros()).is_err());
    }

    #[test]
    fn waveguide_half_wavelength() {
        let arr = build_array(Geometry::WaveguideChain, 6, 0.5, Polarization::Z.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::Waveguide1d).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert!(c.j[(a, b)].abs() < 1e-14);
                assert!((c.gamma[(a, b)].abs() - 1.0).abs() < 1e-14);
            }
        }
        let ring = build_array(Geometry::Ring, 6, 0.5, Polarization::Z.vector()).unwrap();
        assert!(coupling_matrices(&ring, Environment::Waveguide1d).is_err());
    }

    #[test]
    fn simple_environments() {
        let arr = build_array(Geometry::Square, 3, 0.2, Polarization::Circular.vector()).unwrap();
        let ind = coupling_matrices(&arr, Environment::Independent).unwrap();
        assert_eq!(ind.gamma, DMatrix::identity(9, 9));
        assert_eq!(ind.j, DMatrix::zeros(9, 9));
        let dk = coupling_matrices(&arr, Environment::Dicke).unwrap();
        assert!(dk.gamma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn large_spacing_decouples() {
        let arr = build_array(Geometry::Chain, 4, 100.0, Polarization::Circular.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(c.gamma[(a, b)].abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn coincident_emitters_rejected() {
        let mut arr = build_array(Geometry::Chain, 2, 0.1, Polarization::Z.vector()).unwrap();
        arr.positions[1] = arr.positions[0];
        assert!(matches!(
            coupling_matrices(&arr, Environment::FreeSpace),
            Err(Error::SingularSeparation(_))
        ));
    }

    #[test]
    fn csv_dump() {
        let arr = build_array(Geometry::Chain, 2, 0.1, Polarization::Z.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    fn geometry() -> impl Strategy<Value = (Geometry, usize)> {
        prop_oneof![
            (2usize..25).prop_map(|n| (Geometry::Chain, n)),
            (3usize..25).prop_map(|n| (Geometry::Ring, n)),
            (2usize..5).prop_map(|n| (Geometry::Square, n)),
            (2usize..3).prop_map(|n| (Geometry::Cube, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matrix_invariants((kind, n1d) in geometry(), a in 0.05f64..0.8, circ in any::<bool>()) {
            let pol = if circ { Polarization::Circular } else { Polarization::Z };
            let arr = build_array(kind, n1d, a, pol.vector()).unwrap();
            let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
            let n = arr.len();
            for i in 0..n {
                prop_assert_eq!(c.gamma[(i, i)], 1.0);
                prop_assert_eq!(c.j[(i, i)], 0.0);
                for k in 0..n {
                    prop_assert!((c.gamma[(i, k)] - c.gamma[(k, i)]).abs() < 1e-12);
                    prop_assert!((c.j[(i, k)] - c.j[(k, i)]).abs() < 1e-12);
                }
            }
            let eig = SymmetricEigen::new(c.gamma.clone());
            let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(lo >= -1e-10 * n as f64, "min eigenvalue {}", lo);
        }
    }
}
