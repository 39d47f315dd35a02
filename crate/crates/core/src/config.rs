//! Scenario configuration: flat `key = value` files plus overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::couplings::Environment;
use crate::error::{Error, Result};
use crate::exact;
use crate::lattice::{Geometry, Polarization};
use crate::modes::Truncation;
use crate::odeint::IntegratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Cumulant2,
    Collective,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Cumulant2 => "cumulant2",
            Method::Collective => "collective",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" | "master" => Ok(Method::Exact),
            "cumulant2" => Ok(Method::Cumulant2),
            "collective" => Ok(Method::Collective),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (exact | cumulant2 | collective)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub geometry: Geometry,
    /// Emitters per axis.
    pub n1d: usize,
    pub spacing: f64,
    pub polarization: Polarization,
    pub environment: Environment,
    pub method: Method,
    pub truncation: Truncation,
    pub t_max: f64,
    pub points: usize,
    pub integrator: IntegratorConfig,
    pub oracle_cap: usize,
    pub output: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            geometry: Geometry::Chain,
            n1d: 10,
            spacing: 0.15,
            polarization: Polarization::Circular,
            environment: Environment::FreeSpace,
            method: Method::Collective,
            truncation: Truncation::None,
            t_max: 5.0,
            points: 501,
            integrator: IntegratorConfig::default(),
            oracle_cap: exact::DEFAULT_CAP,
            output: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "geometry",
    "n",
    "n1d",
    "spacing",
    "polarization",
    "environment",
    "method",
    "truncation",
    "t_max",
    "points",
    "rtol",
    "atol",
    "max_step",
    "initial_step",
    "dense_output",
    "fixed_step",
    "max_steps",
    "oracle_cap",
    "output",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("field `{key}`: cannot parse `{v}`")))
}

fn opt_num(key: &str, v: &str) -> Result<Option<f64>> {
    if matches!(v, "" | "none" | "auto") {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn field<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) if m.starts_with("field") => Error::Config(m),
        Error::Config(m) => Error::Config(format!("field `{key}`: {m}")),
        e => Error::Config(format!("field `{key}`: {e}")),
    })
}

/// Integer n-th root when `total` is a perfect power.
fn exact_root(total: usize, dims: usize) -> Option<usize> {
    let guess = (total as f64).powf(1.0 / dims as f64).round() as usize;
    (guess.saturating_sub(1)..=guess + 1).find(|r| r.pow(dims as u32) == total)
}

impl ScenarioConfig {
    /// Sets one field. `n` is the total emitter count; for square and
    /// cube it must be a perfect square or cube.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let it = &mut self.integrator;
        match key.trim() {
            "geometry" => self.geometry = field(key, v.parse())?,
            "n1d" => self.n1d = num(key, v)?,
            "n" => {
                let total: usize = num(key, v)?;
                let dims = self.geometry.dims();
                self.n1d = exact_root(total, dims).ok_or_else(|| {
                    Error::Config(format!(
                        "field `n`: {total} is not a {} power for {}",
                        dims, self.geometry
                    ))
                })?;
            }
            "spacing" | "a" => self.spacing = num(key, v)?,
            "polarization" => self.polarization = field(key, v.parse())?,
            "environment" => self.environment = field(key, v.parse())?,
            "method" => self.method = field(key, v.parse())?,
            "truncation" => self.truncation = field(key, v.parse())?,
            "t_max" => self.t_max = num(key, v)?,
            "points" => self.points = num(key, v)?,
            "rtol" => it.rtol = num(key, v)?,
            "atol" => it.atol = num(key, v)?,
            "max_step" => it.max_step = opt_num(key, v)?.unwrap_or(f64::INFINITY),
            "initial_step" => it.initial_step = opt_num(key, v)?,
            "dense_output" => it.dense_output = num(key, v)?,
            "fixed_step" => it.fixed_step = opt_num(key, v)?,
            "max_steps" => it.max_steps = num(key, v)?,
            "oracle_cap" => self.oracle_cap = num(key, v)?,
            "output" => self.output = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Geometry is
    /// applied before `n` regardless of order.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        entries.sort_by_key(|(_, k, _)| k != "geometry");
        for (line, k, v) in entries {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {}", strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a, I>(&mut self, overrides: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, String)>,
    {
        let mut all: Vec<_> = overrides.into_iter().collect();
        all.sort_by_key(|(k, _)| *k != "geometry");
        for (k, v) in all {
            self.set(k, &v).map_err(|e| {
                Error::Config(format!("flag --{}: {}", k.replace('_', "-"), strip(e)))
            })?;
        }
        Ok(())
    }

    pub fn n_emitters(&self) -> usize {
        self.n1d.pow(self.geometry.dims() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::Config(format!("field `{f}`: {m}")));
        if self.n1d == 0 {
            return bad("n", "need at least one emitter".into());
        }
        if self.geometry == Geometry::Ring && self.n1d < 3 {
            return bad(
                "n",
                format!("a ring needs at least 3 emitters, got {}", self.n1d),
            );
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing", format!("must be positive, got {}", self.spacing));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad("t_max", format!("must be positive, got {}", self.t_max));
        }
        if self.points < 2 {
            return bad(
                "points",
                format!("need at least 2 output points, got {}", self.points),
            );
        }
        if let Truncation::Threshold(v) = self.truncation {
            if !(v >= 0.0) {
                return bad(
                    "truncation",
                    format!("threshold must be non-negative, got {v}"),
                );
            }
        }
        if let Truncation::DropK(k) = self.truncation {
            if k >= self.n_emitters() {
                return bad(
                    "truncation",
                    format!("cannot drop {k} of {} modes", self.n_emitters()),
                );
            }
        }
        if self.method == Method::Exact {
            let cap = self.oracle_cap.min(exact::HARD_CAP);
            if self.n_emitters() > cap {
                return bad(
                    "n",
                    format!(
                        "method exact supports at most {cap} emitters, got {}",
                        self.n_emitters()
                    ),
                );
            }
        }
        if self.method != Method::Collective && self.truncation != Truncation::None {
            return bad(
                "truncation",
                format!(
                    "mode truncation only applies to method collective, not {}",
                    self.method
                ),
            );
        }
        if self.environment == Environment::Waveguide1d && !self.geometry.is_linear() {
            return bad(
                "environment",
                format!(
                    "waveguide coupling needs a linear geometry, got {}",
                    self.geometry
                ),
            );
        }
        if self.geometry == Geometry::WaveguideChain && self.environment == Environment::FreeSpace {
            return bad(
                "environment",
                "waveguide_chain geometry needs environment waveguide_1d".into(),
            );
        }
        self.integrator
            .validate()
            .map_err(|e| Error::Config(format!("integrator: {}", strip(e))))
    }

    /// Canonical `key = value` text; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let it = &self.integrator;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("geometry", self.geometry.to_string());
        kv("n1d", self.n1d.to_string());
        kv("spacing", self.spacing.to_string());
        kv("polarization", self.polarization.name().to_string());
        kv("environment", self.environment.name().to_string());
        kv("method", self.method.to_string());
        kv("truncation", self.truncation.to_string());
        kv("t_max", self.t_max.to_string());
        kv("points", self.points.to_string());
        kv("rtol", it.rtol.to_string());
        kv("atol", it.atol.to_string());
        kv(
            "max_step",
            if it.max_step.is_finite() {
                it.max_step.to_string()
            } else {
                "none".into()
            },
        );
        kv("initial_step", opt(it.initial_step));
        kv("dense_output", it.dense_output.to_string());
        kv("fixed_step", opt(it.fixed_step));
        kv("max_steps", it.max_steps.to_string());
        kv("oracle_cap", self.oracle_cap.to_string());
        kv("output", self.output.display().to_string());
        s
    }

    /// Deterministic file stem describing the physical scenario.
    pub fn stem(&self) -> String {
        let trunc = self.truncation.to_string().replace(':', "");
        format!(
            "{}_{}_n{}_a{}_{}_{}",
            self.method,
            self.geometry,
            self.n_emitters(),
            self.spacing,
            self.environment.name(),
            trunc
        )
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_files() {
        let cfg = ScenarioConfig::parse_str(
            "# burst on a square\n n = 400\ngeometry = square\nspacing=0.15 # a/λ\n\
             method = collective\ntruncation = light_cone\nrtol = 1e-9\nmax_step = none\n",
        )
        .unwrap();
        assert_eq!(cfg.geometry, Geometry::Square);
        assert_eq!(cfg.n1d, 20);
        assert_eq!(cfg.n_emitters(), 400);
        assert_eq!(cfg.truncation, Truncation::LightCone);
        assert_eq!(cfg.integrator.rtol, 1e-9);
        cfg.validate().unwrap();
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        let e = ScenarioConfig::parse_str("geometry = ring\nspacing = wide\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("spacing"), "{e}");
        let e = ScenarioConfig::parse_str("colour = red")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 1") && e.contains("colour"), "{e}");
        let e = ScenarioConfig::parse_str("just words")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = ScenarioConfig::parse_str("geometry = square\nn = 50")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("`n`"), "{e}");
    }

    #[test]
    fn validation() {
        let mut c = ScenarioConfig {
            method: Method::Exact,
            n1d: 12,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("at most 10"));
        c.oracle_cap = 12;
        c.validate().unwrap();
        for (k, v) in [
            ("spacing", "-1"),
            ("points", "1"),
            ("t_max", "0"),
            ("rtol", "0"),
        ] {
            let mut c = ScenarioConfig::default();
            c.set(k, v).unwrap();
            let e = c.validate().unwrap_err().to_string();
            assert!(e.contains(k) || e.contains("integrator"), "{k}: {e}");
        }
        let c = ScenarioConfig {
            method: Method::Cumulant2,
            truncation: Truncation::DropK(2),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            geometry: Geometry::Ring,
            environment: Environment::Waveguide1d,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            geometry: Geometry::Ring,
            n1d: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_win_and_text_round_trips() {
        let mut c = ScenarioConfig::parse_str("n = 8\nmethod = exact").unwrap();
        c.apply_overrides([
            ("method", "collective".to_string()),
            ("truncation", "drop_k:3".to_string()),
        ])
        .unwrap();
        assert_eq!(c.method, Method::Collective);
        assert_eq!(c.truncation, Truncation::DropK(3));
        let back = ScenarioConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.stem(), "collective_chain_n8_a0.15_free_space_drop_k3");
        let e = c
            .apply_overrides([("spacing", "x".to_string())])
            .unwrap_err()
            .to_string();
        assert!(e.contains("--spacing"), "{e}");
    }
}
