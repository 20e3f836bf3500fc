//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [run]
//! command = kato
//! seed = 7
//!
//! [mesh]
//! kind = icosphere
//! subdivisions = 2
//! ```
//!
//! `#` starts a comment. Unknown sections or keys, duplicates and out-of-range values
//! are rejected with the offending line.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use geoflow::fem::MassKind;
use geoflow::mesh::MAX_SUBDIVISIONS;
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: Option<usize>, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { line, msg: msg.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Mesh,
    Spectrum,
    HeatKernel,
    Kato,
    Flow,
    Continuity,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Mesh => "mesh",
            Command::Spectrum => "spectrum",
            Command::HeatKernel => "heat-kernel",
            Command::Kato => "kato",
            Command::Flow => "flow",
            Command::Continuity => "continuity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshKind {
    Icosphere,
    Tetrahedron,
    Torus,
    Cone,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSpec {
    pub kind: MeshKind,
    pub subdivisions: u32,
    pub cone_angle: f64,
    pub torus_n: usize,
    pub torus_length: f64,
    pub path: Option<PathBuf>,
    pub mass: MassKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    Identity,
    RandomReal,
    RandomComplex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSpec {
    pub kind: CoefficientKind,
    pub kappa: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatMethod {
    Spectral,
    Uniformized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSpec {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatSpec {
    pub method: HeatMethod,
    /// `None` keeps every mode.
    pub modes: Option<usize>,
    pub times: Vec<f64>,
    pub vertex: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KatoSpec {
    pub levels: Vec<u32>,
    pub magnitudes: Vec<f64>,
    pub eigen_probes: usize,
    pub random_probes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub times: Vec<f64>,
    pub vertex: usize,
    pub exclusion_rings: usize,
    /// `None` computes the metric on all of `N`.
    pub patch_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    HeatKernel,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuitySpec {
    pub family: FamilyKind,
    pub vertex: usize,
    pub time: f64,
    pub margin_fraction: f64,
    /// Fractions of the family's margin.
    pub relative_magnitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: Option<u64>,
    pub mesh: MeshSpec,
    pub coefficients: CoefficientSpec,
    pub spectrum: SpectrumSpec,
    pub heat: HeatSpec,
    pub kato: KatoSpec,
    pub flow: FlowSpec,
    pub continuity: ContinuitySpec,
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["command", "seed"]),
    ("mesh", &["kind", "subdivisions", "cone_angle", "torus_n", "torus_length", "path", "mass"]),
    ("coefficients", &["kind", "kappa", "lambda"]),
    ("spectrum", &["count"]),
    ("heat", &["method", "modes", "times", "vertex"]),
    ("kato", &["levels", "magnitudes", "eigen_probes", "random_probes"]),
    ("flow", &["times", "vertex", "exclusion_rings", "patch_radius"]),
    ("continuity", &["family", "vertex", "t", "margin_fraction", "relative_magnitudes"]),
];

/// Raw entries: section → key → (value, line).
type Raw = BTreeMap<String, BTreeMap<String, (String, usize)>>;

fn tokenize(text: &str) -> Result<Raw, ConfigError> {
    let mut raw = Raw::new();
    let mut section: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let n = Some(i + 1);
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return err(n, "unterminated section header");
            };
            let name = name.trim();
            if !SCHEMA.iter().any(|(s, _)| *s == name) {
                return err(n, format!("unknown section [{name}]"));
            }
            if raw.contains_key(name) {
                return err(n, format!("section [{name}] appears twice"));
            }
            raw.insert(name.to_string(), BTreeMap::new());
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(n, format!("expected `key = value`, found `{line}`"));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(sec) = &section else {
            return err(n, "entry outside of any section");
        };
        let allowed = SCHEMA.iter().find(|(s, _)| s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            return err(n, format!("unknown key `{key}` in [{sec}]"));
        }
        if value.is_empty() {
            return err(n, format!("empty value for `{key}`"));
        }
        let entries = raw.get_mut(sec).expect("section inserted above");
        if entries.insert(key.to_string(), (value.to_string(), i + 1)).is_some() {
            return err(n, format!("`{key}` set twice in [{sec}]"));
        }
    }
    Ok(raw)
}

/// Typed access to one section, recording the line of each value for error messages.
struct Section<'a> {
    entries: Option<&'a BTreeMap<String, (String, usize)>>,
}

impl<'a> Section<'a> {
    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        self.entries.and_then(|e| e.get(key)).map(|(v, l)| (v.as_str(), *l))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, l)) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError { line: Some(l), msg: format!("cannot parse `{key}` = `{v}`") }),
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, l)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<Vec<T>, _>>()
                .map_err(|_| ConfigError { line: Some(l), msg: format!("cannot parse list `{key}` = `{v}`") }),
        }
    }

    fn choice<T: Copy>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, l)) => options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                ConfigError { line: Some(l), msg: format!("`{key}` must be one of {}, found `{v}`", names.join(" | ")) }
            }),
        }
    }

    /// Checks a parsed value, pointing at its line when it fails.
    fn check(&self, key: &str, ok: bool, msg: impl Into<String>) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            err(self.raw(key).map(|(_, l)| l), format!("`{key}`: {}", msg.into()))
        }
    }
}

fn positive_times(s: &Section, key: &str, times: &[f64], min_len: usize) -> Result<(), ConfigError> {
    s.check(key, times.len() >= min_len, format!("needs at least {min_len} value(s)"))?;
    s.check(key, times.iter().all(|t| t.is_finite() && *t > 0.0), "times must be positive and finite")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw = tokenize(text)?;
        let section = |name: &str| Section { entries: raw.get(name) };

        let run = section("run");
        let command = match run.raw("command") {
            None => return err(None, "[run] command is required"),
            Some(_) => run.choice(
                "command",
                Command::Mesh,
                &[
                    ("mesh", Command::Mesh),
                    ("spectrum", Command::Spectrum),
                    ("heat-kernel", Command::HeatKernel),
                    ("kato", Command::Kato),
                    ("flow", Command::Flow),
                    ("continuity", Command::Continuity),
                ],
            )?,
        };
        let seed = run.parse::<u64>("seed")?;

        let m = section("mesh");
        let mesh = MeshSpec {
            kind: m.choice(
                "kind",
                MeshKind::Icosphere,
                &[
                    ("icosphere", MeshKind::Icosphere),
                    ("tetrahedron", MeshKind::Tetrahedron),
                    ("torus", MeshKind::Torus),
                    ("cone", MeshKind::Cone),
                    ("file", MeshKind::File),
                ],
            )?,
            subdivisions: m.get("subdivisions", 2)?,
            cone_angle: m.get("cone_angle", PI)?,
            torus_n: m.get("torus_n", 24)?,
            torus_length: m.get("torus_length", 6.0)?,
            path: m.parse::<PathBuf>("path")?,
            mass: m.choice("mass", MassKind::Consistent, &[("consistent", MassKind::Consistent), ("lumped", MassKind::Lumped)])?,
        };
        m.check("subdivisions", mesh.subdivisions <= MAX_SUBDIVISIONS, format!("at most {MAX_SUBDIVISIONS}"))?;
        m.check("cone_angle", mesh.cone_angle >= 0.05 && mesh.cone_angle <= 2.0 * PI, "must lie in [0.05, 2π]")?;
        m.check("torus_n", (3..=400).contains(&mesh.torus_n), "must lie in [3, 400]")?;
        m.check("torus_length", mesh.torus_length.is_finite() && mesh.torus_length > 0.0, "must be positive")?;
        if mesh.kind == MeshKind::File && mesh.path.is_none() {
            return err(None, "[mesh] kind = file needs `path`");
        }

        let c = section("coefficients");
        let coefficients = CoefficientSpec {
            kind: c.choice(
                "kind",
                CoefficientKind::Identity,
                &[
                    ("identity", CoefficientKind::Identity),
                    ("random_real", CoefficientKind::RandomReal),
                    ("random_complex", CoefficientKind::RandomComplex),
                ],
            )?,
            kappa: c.get("kappa", 0.5)?,
            lambda: c.get("lambda", 2.0)?,
        };
        c.check("kappa", coefficients.kappa.is_finite() && coefficients.kappa > 0.0, "must be positive")?;
        c.check(
            "lambda",
            coefficients.lambda.is_finite() && coefficients.lambda >= coefficients.kappa,
            "must be finite and at least kappa",
        )?;

        let sp = section("spectrum");
        let spectrum = SpectrumSpec { count: sp.get("count", 10)? };
        sp.check("count", (2..=200).contains(&spectrum.count), "must lie in [2, 200]")?;

        let h = section("heat");
        let heat = HeatSpec {
            method: h.choice("method", HeatMethod::Spectral, &[("spectral", HeatMethod::Spectral), ("uniformized", HeatMethod::Uniformized)])?,
            modes: match h.raw("modes") {
                Some(("all", _)) | None => None,
                Some(_) => Some(h.get::<usize>("modes", 0)?),
            },
            times: h.list("times", vec![0.1, 0.5, 1.0])?,
            vertex: h.get("vertex", 0)?,
        };
        positive_times(&h, "times", &heat.times, 1)?;
        h.check("modes", heat.modes.map_or(true, |k| k >= 2), "keep at least 2 modes, or `all`")?;
        h.check(
            "modes",
            heat.method == HeatMethod::Spectral || heat.modes.is_none(),
            "uniformized kernels keep every mode",
        )?;

        let k = section("kato");
        let kato = KatoSpec {
            levels: k.list("levels", vec![mesh.subdivisions])?,
            magnitudes: k.list("magnitudes", vec![1e-4, 1e-3, 1e-2, 1e-1])?,
            eigen_probes: k.get("eigen_probes", 10)?,
            random_probes: k.get("random_probes", 10)?,
        };
        k.check("levels", !kato.levels.is_empty() && kato.levels.iter().all(|&l| l <= MAX_SUBDIVISIONS), "levels in [0, 7]")?;
        k.check("magnitudes", kato.magnitudes.len() >= 2, "needs at least two magnitudes")?;
        k.check("magnitudes", kato.magnitudes.iter().all(|&m| m > 0.0 && m < 1.0), "magnitudes in (0, 1)")?;
        k.check("eigen_probes", kato.eigen_probes + kato.random_probes > 0, "no probes")?;
        if kato.levels.len() > 1 && !matches!(mesh.kind, MeshKind::Icosphere | MeshKind::Cone) {
            return err(None, "[kato] several levels need an icosphere or cone mesh");
        }

        let f = section("flow");
        let flow = FlowSpec {
            times: f.list("times", vec![0.02, 0.04, 0.06, 0.08, 0.1])?,
            vertex: f.get("vertex", 0)?,
            exclusion_rings: f.get("exclusion_rings", 0)?,
            patch_radius: match f.raw("patch_radius") {
                Some(("all", _)) => None,
                _ => Some(f.get("patch_radius", 0.25)?),
            },
        };
        positive_times(&f, "times", &flow.times, 2)?;
        f.check("patch_radius", flow.patch_radius.map_or(true, |r| r.is_finite() && r > 0.0), "must be positive or `all`")?;

        let s = section("continuity");
        let continuity = ContinuitySpec {
            family: s.choice("family", FamilyKind::HeatKernel, &[("heat_kernel", FamilyKind::HeatKernel), ("random", FamilyKind::Random)])?,
            vertex: s.get("vertex", 0)?,
            time: s.get("t", 1.0)?,
            margin_fraction: s.get("margin_fraction", 0.5)?,
            relative_magnitudes: s.list("relative_magnitudes", (0..8).map(|k| 10f64.powi(-k)).chain([0.0]).collect())?,
        };
        s.check("t", continuity.time.is_finite() && continuity.time > 0.0, "must be positive")?;
        s.check("margin_fraction", continuity.margin_fraction > 0.0 && continuity.margin_fraction < 1.0, "must lie in (0, 1)")?;
        s.check(
            "relative_magnitudes",
            !continuity.relative_magnitudes.is_empty() && continuity.relative_magnitudes.iter().all(|m| (0.0..=1.0).contains(m)),
            "fractions of the margin in [0, 1]",
        )?;

        let cfg = Self { command, seed, mesh, coefficients, spectrum, heat, kato, flow, continuity };
        cfg.check_seed()?;
        if cfg.command == Command::Continuity
            && cfg.continuity.family == FamilyKind::Random
            && cfg.coefficients.kind == CoefficientKind::RandomComplex
        {
            return err(None, "continuity families need real coefficients");
        }
        Ok(cfg)
    }

    pub fn needs_seed(&self) -> bool {
        self.coefficients.kind != CoefficientKind::Identity
            || matches!(self.command, Command::Spectrum | Command::Kato)
            || (self.command == Command::Continuity && self.continuity.family == FamilyKind::Random)
    }

    pub fn check_seed(&self) -> Result<(), ConfigError> {
        if self.needs_seed() && self.seed.is_none() {
            return err(None, format!("`{}` with this configuration draws random numbers; [run] seed is required", self.command.as_str()));
        }
        Ok(())
    }

    /// The effective configuration, for the summary.
    pub fn echo(&self) -> Value {
        let mass = match self.mesh.mass {
            MassKind::Consistent => "consistent",
            MassKind::Lumped => "lumped",
        };
        let mut mesh = json!({ "kind": format!("{:?}", self.mesh.kind).to_lowercase(), "mass": mass });
        let m = mesh.as_object_mut().expect("object");
        match self.mesh.kind {
            MeshKind::Icosphere => {
                m.insert("subdivisions".into(), json!(self.mesh.subdivisions));
            }
            MeshKind::Cone => {
                m.insert("subdivisions".into(), json!(self.mesh.subdivisions));
                m.insert("cone_angle".into(), json!(self.mesh.cone_angle));
            }
            MeshKind::Torus => {
                m.insert("torus_n".into(), json!(self.mesh.torus_n));
                m.insert("torus_length".into(), json!(self.mesh.torus_length));
            }
            MeshKind::File => {
                m.insert("path".into(), json!(self.mesh.path.as_ref().map(|p| p.display().to_string())));
            }
            MeshKind::Tetrahedron => {}
        }
        let coefficients = json!({
            "kind": match self.coefficients.kind {
                CoefficientKind::Identity => "identity",
                CoefficientKind::RandomReal => "random_real",
                CoefficientKind::RandomComplex => "random_complex",
            },
            "kappa": self.coefficients.kappa,
            "lambda": self.coefficients.lambda,
        });
        let section = match self.command {
            Command::Mesh => json!({}),
            Command::Spectrum => json!({ "count": self.spectrum.count }),
            Command::HeatKernel => json!({
                "method": match self.heat.method { HeatMethod::Spectral => "spectral", HeatMethod::Uniformized => "uniformized" },
                "modes": self.heat.modes,
                "times": self.heat.times,
                "vertex": self.heat.vertex,
            }),
            Command::Kato => json!({
                "levels": self.kato.levels,
                "magnitudes": self.kato.magnitudes,
                "eigen_probes": self.kato.eigen_probes,
                "random_probes": self.kato.random_probes,
            }),
            Command::Flow => json!({
                "times": self.flow.times,
                "vertex": self.flow.vertex,
                "exclusion_rings": self.flow.exclusion_rings,
                "patch_radius": self.flow.patch_radius,
            }),
            Command::Continuity => json!({
                "family": match self.continuity.family { FamilyKind::HeatKernel => "heat_kernel", FamilyKind::Random => "random" },
                "vertex": self.continuity.vertex,
                "t": self.continuity.time,
                "margin_fraction": self.continuity.margin_fraction,
                "relative_magnitudes": self.continuity.relative_magnitudes,
            }),
        };
        json!({
            "command": self.command.as_str(),
            "seed": self.seed,
            "mesh": mesh,
            "coefficients": coefficients,
            self.command.as_str(): section,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::parse("[run]\ncommand = mesh\n").unwrap();
        assert_eq!(cfg.command, Command::Mesh);
        assert_eq!(cfg.mesh.kind, MeshKind::Icosphere);
        assert_eq!(cfg.mesh.subdivisions, 2);
        assert_eq!(cfg.seed, None);
    }

    #[test]
    fn lists_comments_and_choices_parse() {
        let text = "# kato run\n[run]\ncommand = kato  # inline\nseed = 7\n[kato]\nlevels = 1, 2,3\n[heat]\nmodes = all\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.kato.levels, vec![1, 2, 3]);
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.heat.modes, None);
    }

    #[test]
    fn malformed_input_names_the_line() {
        let cases = [
            ("[run]\ncommand = dance\n", Some(2)),
            ("[run]\ncommand = mesh\n[mesh]\nsubdivisions = 12\n", Some(4)),
            ("[run]\ncommand = mesh\n[mesh]\nfoo = 1\n", Some(4)),
            ("[run]\ncommand = mesh\ncommand = kato\n", Some(3)),
            ("command = mesh\n", Some(1)),
            ("[run\ncommand = mesh\n", Some(1)),
            ("[run]\ncommand = flow\n[flow]\ntimes = 0.1\n", Some(4)),
            ("[run]\ncommand = flow\n[flow]\ntimes = 0.1, x\n", Some(4)),
            ("[mesh]\nkind = torus\n", None),
        ];
        for (text, line) in cases {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn randomized_runs_need_a_seed() {
        assert!(RunConfig::parse("[run]\ncommand = kato\n").is_err());
        assert!(RunConfig::parse("[run]\ncommand = mesh\n[coefficients]\nkind = random_real\n").is_err());
        assert!(RunConfig::parse("[run]\ncommand = heat-kernel\n").is_ok());
    }

    #[test]
    fn echo_is_stable_and_scoped_to_the_command() {
        let cfg = RunConfig::parse("[run]\ncommand = flow\n[mesh]\nsubdivisions = 4\n").unwrap();
        let echo = cfg.echo();
        assert_eq!(echo["command"], "flow");
        assert_eq!(echo["mesh"]["subdivisions"], 4);
        assert!(echo.get("kato").is_none());
        assert_eq!(echo.to_string(), cfg.clone().echo().to_string());
    }
}
