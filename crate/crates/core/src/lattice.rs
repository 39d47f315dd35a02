//! Emitter geometries.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Chain,
    Ring,
    Square,
    Cube,
    WaveguideChain,
}

impl Geometry {
    /// Number of lattice axes carrying a quasi-momentum.
    pub fn dims(self) -> usize {
        match self {
            Geometry::Chain | Geometry::Ring | Geometry::WaveguideChain => 1,
            Geometry::Square => 2,
            Geometry::Cube => 3,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Geometry::Chain | Geometry::WaveguideChain)
    }

    pub fn name(self) -> &'static str {
        match self {
            Geometry::Chain => "chain",
            Geometry::Ring => "ring",
            Geometry::Square => "square",
            Geometry::Cube => "cube",
            Geometry::WaveguideChain => "waveguide_chain",
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Geometry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chain" => Ok(Geometry::Chain),
            "ring" => Ok(Geometry::Ring),
            "square" => Ok(Geometry::Square),
            "cube" => Ok(Geometry::Cube),
            "waveguide_chain" | "waveguide-chain" | "waveguide" => Ok(Geometry::WaveguideChain),
            other => Err(Error::Config(format!("unknown geometry `{other}`"))),
        }
    }
}

/// Named dipole orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    /// (1, i, 0)/√2
    Circular,
    X,
    Y,
    Z,
}

impl Polarization {
    pub fn vector(self) -> [C64; 3] {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        match self {
            Polarization::Circular => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                [C64::new(s, 0.0), C64::new(0.0, s), o]
            }
            Polarization::X => [l, o, o],
            Polarization::Y => [o, l, o],
            Polarization::Z => [o, o, l],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarization::Circular => "circular",
            Polarization::X => "x",
            Polarization::Y => "y",
            Polarization::Z => "z",
        }
    }
}

impl FromStr for Polarization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "circular" => Ok(Polarization::Circular),
            "x" => Ok(Polarization::X),
            "y" => Ok(Polarization::Y),
            "z" => Ok(Polarization::Z),
            other => Err(Error::Config(format!("unknown polarization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmitterArray {
    pub kind: Geometry,
    pub n1d: usize,
    pub spacing: f64,
    pub positions: Vec<Vector3<f64>>,
    /// Integer lattice coordinates; for a ring, the index around the ring.
    pub sites: Vec<[i64; 3]>,
    pub polarization: [C64; 3],
    /// Set when the supplied dipole vector had to be rescaled to unit norm.
    pub renormalized: bool,
}

impl EmitterArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.kind.dims()
    }

    /// CSV with columns index,x,y,z (units of λ₀).
    pub fn write_positions_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,x,y,z")?;
        for (i, r) in self.positions.iter().enumerate() {
            writeln!(w, "{i},{:.16e},{:.16e},{:.16e}", r.x, r.y, r.z)?;
        }
        Ok(())
    }
}

/// Lays out the array and normalizes `d`, flagging any rescaling in
/// [`EmitterArray::renormalized`].
pub fn build_array(kind: Geometry, n1d: usize, a: f64, d: [C64; 3]) -> Result<EmitterArray> {
    build(kind, n1d, a, d, false)
}

/// As [`build_array`] but a dipole vector off unit norm is an error.
pub fn build_array_strict(kind: Geometry, n1d: usize, a: f64, d: [C64; 3]) -> Result<EmitterArray> {
    build(kind, n1d, a, d, true)
}

fn build(kind: Geometry, n1d: usize, a: f64, d: [C64; 3], strict: bool) -> Result<EmitterArray> {
    if n1d == 0 {
        return Err(Error::InvalidGeometry("n1d must be at least 1".into()));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "spacing must be positive, got {a}"
        )));
    }
    if kind == Geometry::Ring && n1d < 3 {
        return Err(Error::InvalidGeometry(format!(
            "a ring needs at least 3 emitters, got {n1d}"
        )));
    }
    let norm = d.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NonUnitPolarization { norm });
    }
    let renormalized = (norm - 1.0).abs() > 1e-12;
    if renormalized && strict {
        return Err(Error::NonUnitPolarization { norm });
    }
    let polarization = d.map(|c| c / norm);

    let mut sites = Vec::new();
    let mut positions = Vec::new();
    match kind {
        Geometry::Chain | Geometry::WaveguideChain | Geometry::Ring => {
            for n in 0..n1d as i64 {
                sites.push([n, 0, 0]);
            }
        }
        Geometry::Square => {
            for ny in 0..n1d as i64 {
                for nx in 0..n1d as i64 {
                    sites.push([nx, ny, 0]);
                }
            }
        }
        Geometry::Cube => {
            for nz in 0..n1d as i64 {
                for ny in 0..n1d as i64 {
                    for nx in 0..n1d as i64 {
                        sites.push([nx, ny, nz]);
                    }
                }
            }
        }
    }
    if kind == Geometry::Ring {
        let radius = a / (2.0 * (std::f64::consts::PI / n1d as f64).sin());
        for s in &sites {
            let phi = 2.0 * std::f64::consts::PI * s[0] as f64 / n1d as f64;
            positions.push(Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0));
        }
    } else {
        for s in &sites {
            positions.push(Vector3::new(
                s[0] as f64 * a,
                s[1] as f64 * a,
                s[2] as f64 * a,
            ));
        }
    }
    Ok(EmitterArray {
        kind,
        n1d,
        spacing: a,
        positions,
        sites,
        polarization,
        renormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nearest(arr: &EmitterArray) -> Vec<f64> {
        let p = &arr.positions;
        (0..p.len())
            .map(|i| {
                (0..p.len())
                    .filter(|&j| j != i)
                    .map(|j| (p[i] - p[j]).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn chain_positions() {
        let arr = build_array(Geometry::Chain, 3, 0.2, Polarization::Z.vector()).unwrap();
        assert_eq!(arr.positions[0], Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(arr.positions[1], Vector3::new(0.2, 0.0, 0.0));
        assert_eq!(arr.positions[2], Vector3::new(0.4, 0.0, 0.0));
        assert!(!arr.renormalized);
    }

    #[test]
    fn ring_of_four_is_an_inscribed_square() {
        let a = 0.3;
        let arr = build_array(Geometry::Ring, 4, a, Polarization::Circular.vector()).unwrap();
        for r in &arr.positions {
            assert!((r.norm() - a / 2f64.sqrt()).abs() < 1e-12);
        }
        for i in 0..4 {
            let d = (arr.positions[i] - arr.positions[(i + 1) % 4]).norm();
            assert!((d - a).abs() < 1e-12);
        }
    }

    #[test]
    fn square_of_400() {
        let arr = build_array(Geometry::Square, 20, 0.15, Polarization::Circular.vector()).unwrap();
        assert_eq!(arr.len(), 400);
        let cube = build_array(Geometry::Cube, 4, 0.15, Polarization::Circular.vector()).unwrap();
        assert_eq!(cube.len(), 64);
        assert_eq!(cube.dims(), 3);
    }

    #[test]
    fn errors() {
        let d = Polarization::Z.vector();
        assert!(build_array(Geometry::Ring, 2, 0.1, d).is_err());
        assert!(build_array(Geometry::Chain, 0, 0.1, d).is_err());
        assert!(build_array(Geometry::Chain, 3, 0.0, d).is_err());
        let long = [C64::new(2.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
        let arr = build_array(Geometry::Chain, 3, 0.1, long).unwrap();
        assert!(arr.renormalized);
        assert!((arr.polarization[0].re - 1.0).abs() < 1e-15);
        assert!(build_array_strict(Geometry::Chain, 3, 0.1, long).is_err());
    }

    #[test]
    fn positions_csv() {
        let arr = build_array(Geometry::Chain, 2, 0.5, Polarization::Z.vector()).unwrap();
        let mut buf = Vec::new();
        arr.write_positions_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("index,x,y,z\n0,"));
        assert_eq!(s.lines().count(), 3);
    }

    fn any_geometry() -> impl Strategy<Value = (Geometry, usize)> {
        prop_oneof![
            (1usize..30).prop_map(|n| (Geometry::Chain, n)),
            (3usize..40).prop_map(|n| (Geometry::Ring, n)),
            (1usize..8).prop_map(|n| (Geometry::Square, n)),
            (1usize..4).prop_map(|n| (Geometry::Cube, n)),
            (1usize..30).prop_map(|n| (Geometry::WaveguideChain, n)),
        ]
    }

    proptest! {
        #[test]
        fn nearest_neighbour_is_spacing((kind, n1d) in any_geometry(), a in 0.01f64..2.0) {
            let arr = build_array(kind, n1d, a, Polarization::Circular.vector()).unwrap();
            prop_assert_eq!(arr.len(), n1d.pow(kind.dims() as u32));
            let d = arr.polarization.iter().map(|c| c.norm_sqr()).sum::<f64>();
            prop_assert!((d - 1.0).abs() < 1e-12);
            if arr.len() > 1 {
                for d in nearest(&arr) {
                    prop_assert!((d - a).abs() < 1e-12 * a.max(1.0) * 10.0, "{} vs {}", d, a);
                }
            }
            let again = build_array(kind, n1d, a, Polarization::Circular.vector()).unwrap();
            prop_assert_eq!(arr, again);
        }
    }
}
