//! Run configuration: `key = value` lines grouped under `[section]` headers.
//! Blank lines and lines starting with `#` are ignored. Every key must belong
//! to its section; unknown sections and keys are rejected.

use std::collections::BTreeMap;

use normdiff::dynamics::StoppingRule;
use normdiff::graph::GraphFile;
use normdiff::scheduler::HammerRule;
use normdiff::{Beta, Configuration, Family, PayoffMatrix, SchedulerSpec, WeightedGraph};

use crate::CliError;

/// Accepted keys per section, in help order.
pub const KEYS: &[(&str, &[&str])] = &[
    ("game", &["a", "b", "c", "d", "non_potential"]),
    ("model", &["beta"]),
    ("graph", &["family", "file"]),
    ("scheduler", &["kind", "groups", "order", "r", "hammer", "walk", "start"]),
    (
        "run",
        &[
            "stop", "budget", "initial", "p", "r", "k", "sizes", "replicas", "starts", "horizon", "rounds", "seed",
        ],
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub enum BetaSetting {
    Fixed(Beta),
    /// Chosen by the pilot rule (inertia and scaling only).
    Pilot,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphSource {
    Family(Family),
    File { path: String, file: GraphFile },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchedulerChoice {
    Random,
    RoundRobin,
    Periodic { groups: Vec<Vec<usize>>, order: Option<Vec<usize>> },
    Adversary { r: f64, order: Option<Vec<usize>>, hammer: HammerRule },
    /// Walk rows from the graph file's `contagion:` section; starts at 0 by default.
    ContagionFile { start: Option<usize> },
    /// Lazy walk over graph neighbors; starts at the center `n / 2` by default.
    ContagionLazy { start: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub payoff: PayoffMatrix,
    pub beta: BetaSetting,
    pub graph: GraphSource,
    pub scheduler: SchedulerChoice,
    pub stop: Option<StoppingRule>,
    pub budget: Option<u64>,
    pub initial: Option<String>,
    pub p: Option<f64>,
    pub r: Option<f64>,
    pub k: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub replicas: Option<usize>,
    pub starts: Option<usize>,
    pub horizon: Option<u64>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
}

type Raw = BTreeMap<(String, String), (usize, String)>;

fn field_err(section: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("[{section}] {key}: {msg}"))
}

fn parse_raw(text: &str) -> Result<Raw, CliError> {
    let mut raw = Raw::new();
    let mut section: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(CliError::Validation(format!("line {ln}: unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Validation(format!("line {ln}: expected key = value, got {line:?}")));
        };
        let Some(sec) = &section else {
            return Err(CliError::Validation(format!("line {ln}: key outside any [section]")));
        };
        let key = key.trim();
        let allowed = KEYS.iter().find(|(s, _)| s == sec).map(|(_, k)| *k).unwrap_or(&[]);
        if !allowed.contains(&key) {
            return Err(CliError::Validation(format!("line {ln}: unknown key [{sec}] {key}")));
        }
        if raw.insert((sec.clone(), key.to_string()), (ln, value.trim().to_string())).is_some() {
            return Err(CliError::Validation(format!("line {ln}: duplicate key [{sec}] {key}")));
        }
    }
    Ok(raw)
}

struct Fields {
    raw: Raw,
}

impl Fields {
    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.raw.get(&(section.to_string(), key.to_string())).map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| v.parse::<T>().map_err(|e| field_err(section, key, format!("{v:?}: {e}"))))
            .transpose()
    }

    fn require<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(section, key)?
            .ok_or_else(|| field_err(section, key, "missing"))
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>, CliError> {
        self.get(section, key).map(|v| parse_list(v).map_err(|e| field_err(section, key, e))).transpose()
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| format!("bad integer {:?} in list", x.trim())))
        .collect()
}

impl RunConfig {
    /// Parses `text`; `file` paths in `[graph]` resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &std::path::Path) -> Result<Self, CliError> {
        let f = Fields { raw: parse_raw(text)? };

        let (a, b, c, d): (f64, f64, f64, f64) = (
            f.require("game", "a")?,
            f.require("game", "b")?,
            f.require("game", "c")?,
            f.require("game", "d")?,
        );
        let non_potential = f.parse::<bool>("game", "non_potential")?.unwrap_or(false);
        let payoff = if non_potential {
            PayoffMatrix::with_non_potential_override(a, b, c, d)
        } else {
            PayoffMatrix::new(a, b, c, d)
        }
        .map_err(|e| CliError::Validation(format!("[game]: {}", strip_prefix(&e))))?;

        let beta = match f.get("model", "beta") {
            None => return Err(field_err("model", "beta", "missing")),
            Some("pilot") => BetaSetting::Pilot,
            Some(v) => {
                let b: Beta = v.parse().map_err(|e| field_err("model", "beta", format!("{v:?}: {}", strip_prefix(&e))))?;
                BetaSetting::Fixed(b)
            }
        };

        let graph = match (f.get("graph", "family"), f.get("graph", "file")) {
            (Some(fam), None) => GraphSource::Family(
                fam.parse()
                    .map_err(|e| field_err("graph", "family", strip_prefix(&e)))?,
            ),
            (None, Some(path)) => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| field_err("graph", "file", format!("{}: {e}", full.display())))?;
                let file: GraphFile = text.parse().map_err(|e| field_err("graph", "file", strip_prefix(&e)))?;
                GraphSource::File {
                    path: path.to_string(),
                    file,
                }
            }
            (Some(_), Some(_)) => return Err(field_err("graph", "family", "give either family or file, not both")),
            (None, None) => return Err(field_err("graph", "family", "missing (or set file)")),
        };

        let kind = f.get("scheduler", "kind").unwrap_or("random");
        let order = f.list("scheduler", "order")?;
        let start = f.parse::<usize>("scheduler", "start")?;
        let scheduler = match kind {
            "random" => SchedulerChoice::Random,
            "round-robin" => SchedulerChoice::RoundRobin,
            "periodic" => {
                let groups = f
                    .get("scheduler", "groups")
                    .ok_or_else(|| field_err("scheduler", "groups", "missing for periodic scheduler"))?
                    .split(';')
                    .map(parse_list)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| field_err("scheduler", "groups", e))?;
                SchedulerChoice::Periodic { groups, order }
            }
            "adversary" => SchedulerChoice::Adversary {
                r: f.require("scheduler", "r")?,
                order,
                hammer: match f.get("scheduler", "hammer").unwrap_or("containing") {
                    "containing" => HammerRule::Containing,
                    "literal" => HammerRule::Literal,
                    other => return Err(field_err("scheduler", "hammer", format!("{other:?}: expected containing or literal"))),
                },
            },
            "contagion" => match f.get("scheduler", "walk").unwrap_or("lazy") {
                "lazy" => SchedulerChoice::ContagionLazy { start },
                "file" => SchedulerChoice::ContagionFile { start },
                other => return Err(field_err("scheduler", "walk", format!("{other:?}: expected lazy or file"))),
            },
            other => {
                return Err(field_err(
                    "scheduler",
                    "kind",
                    format!("{other:?}: expected random, round-robin, periodic, adversary or contagion"),
                ))
            }
        };

        let stop = f
            .get("run", "stop")
            .map(|v| v.parse::<StoppingRule>().map_err(|e| field_err("run", "stop", strip_prefix(&e))))
            .transpose()?;

        Ok(RunConfig {
            payoff,
            beta,
            graph,
            scheduler,
            stop,
            budget: f.parse("run", "budget")?,
            initial: f.get("run", "initial").map(str::to_string),
            p: f.parse("run", "p")?,
            r: f.parse("run", "r")?,
            k: f.parse("run", "k")?,
            sizes: f.list("run", "sizes")?,
            replicas: f.parse("run", "replicas")?,
            starts: f.parse("run", "starts")?,
            horizon: f.parse("run", "horizon")?,
            rounds: f.parse("run", "rounds")?,
            seed: f.parse("run", "seed")?,
        })
    }

    pub fn build_graph(&self) -> Result<WeightedGraph, CliError> {
        match &self.graph {
            GraphSource::Family(f) => f.build().map_err(|e| field_err("graph", "family", strip_prefix(&e))),
            GraphSource::File { file, .. } => Ok(file.graph.clone()),
        }
    }

    /// Family with its size replaced, for scaling sweeps.
    pub fn family(&self) -> Result<&Family, CliError> {
        match &self.graph {
            GraphSource::Family(f) => Ok(f),
            GraphSource::File { .. } => Err(field_err("graph", "family", "this command needs a generator family")),
        }
    }

    pub fn graph_id(&self) -> String {
        match &self.graph {
            GraphSource::Family(f) => f.to_string(),
            GraphSource::File { path, .. } => path.clone(),
        }
    }

    pub fn fixed_beta(&self) -> Result<Beta, CliError> {
        match self.beta {
            BetaSetting::Fixed(b) => Ok(b),
            BetaSetting::Pilot => Err(field_err("model", "beta", "pilot is only accepted by inertia and scaling")),
        }
    }

    /// Scheduler spec for `graph`.
    pub fn scheduler_spec(&self, graph: &WeightedGraph) -> Result<SchedulerSpec, CliError> {
        let n = graph.n();
        let spec = match &self.scheduler {
            SchedulerChoice::Random => SchedulerSpec::Random,
            SchedulerChoice::RoundRobin => SchedulerSpec::round_robin(n),
            SchedulerChoice::Periodic { groups, order } => {
                if let Some(v) = groups.iter().flatten().find(|&&v| v >= n) {
                    return Err(field_err("scheduler", "groups", format!("vertex {v} outside 0..{n}")));
                }
                if groups.iter().any(|g| g.is_empty()) {
                    return Err(field_err("scheduler", "groups", "empty group"));
                }
                match SchedulerSpec::periodic_uniform(n, groups) {
                    SchedulerSpec::NonAdaptivePeriodic { distributions, order: default } => {
                        SchedulerSpec::NonAdaptivePeriodic {
                            distributions,
                            order: order.clone().unwrap_or(default),
                        }
                    }
                    other => other,
                }
            }
            SchedulerChoice::Adversary { r, order, hammer } => SchedulerSpec::AdversarialAdaptive {
                r: *r,
                order: order.clone().unwrap_or_else(|| (0..n).collect()),
                hammer: *hammer,
            },
            SchedulerChoice::ContagionLazy { start } => SchedulerSpec::lazy_walk(graph, start.unwrap_or(n / 2)),
            SchedulerChoice::ContagionFile { start } => match &self.graph {
                GraphSource::File {
                    file: GraphFile {
                        contagion: Some(rows), ..
                    },
                    ..
                } => SchedulerSpec::Contagion {
                    rows: rows.clone(),
                    start: start.unwrap_or(0),
                },
                _ => return Err(field_err("scheduler", "walk", "file walk needs a graph file with a contagion: section")),
            },
        };
        spec.validate(n)
            .map_err(|e| CliError::Validation(format!("[scheduler]: {}", strip_prefix(&e))))?;
        Ok(spec)
    }

    pub fn initial_config(&self, n: usize) -> Result<Configuration, CliError> {
        match self.initial.as_deref().unwrap_or("all-b") {
            "all-b" => Ok(Configuration::all_b(n)),
            "all-a" => Ok(Configuration::all_a(n)),
            bits => {
                let c: Configuration = bits.parse().map_err(|e| field_err("run", "initial", strip_prefix(&e)))?;
                if c.len() != n {
                    return Err(field_err("run", "initial", format!("has {} vertices, graph has {n}", c.len())));
                }
                Ok(c)
            }
        }
    }
}

/// Error text without the core crate's category prefix.
fn strip_prefix(e: &normdiff::Error) -> String {
    match e {
        normdiff::Error::Invalid(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[game]\na = 3\nb = 2\nc = 0\nd = 0\n[model]\nbeta = 1\n[graph]\nfamily = complete:2\n";

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, std::path::Path::new("."))
    }

    #[test]
    fn minimal_config() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.beta, BetaSetting::Fixed(Beta::Finite(1.0)));
        assert_eq!(cfg.scheduler, SchedulerChoice::Random);
        assert_eq!(cfg.build_graph().unwrap().n(), 2);
    }

    #[test]
    fn unknown_keys_and_sections() {
        let err = parse(&format!("{MINIMAL}[run]\nsped = 3\n")).unwrap_err();
        assert!(err.to_string().contains("unknown key [run] sped"), "{err}");
        let err = parse(&format!("{MINIMAL}[extra]\n")).unwrap_err();
        assert!(err.to_string().contains("unknown section"));
        let err = parse("a = 3\n").unwrap_err();
        assert!(err.to_string().contains("outside any [section]"));
        let err = parse(&format!("{MINIMAL}[model]\nbeta = 2\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn field_level_messages() {
        let err = parse(&MINIMAL.replace("a = 3", "a = 1")).unwrap_err();
        assert!(err.to_string().contains("risk dominance"), "{err}");
        let err = parse(&MINIMAL.replace("beta = 1", "beta = hot")).unwrap_err();
        assert!(err.to_string().contains("[model] beta"), "{err}");
        let err = parse(&MINIMAL.replace("complete:2", "torus:3")).unwrap_err();
        assert!(err.to_string().contains("[graph] family"), "{err}");
        let err = parse(&format!("{MINIMAL}[scheduler]\nkind = periodic\n")).unwrap_err();
        assert!(err.to_string().contains("[scheduler] groups"), "{err}");
    }

    #[test]
    fn scheduler_choices() {
        let cfg = parse(&format!("{MINIMAL}[scheduler]\nkind = adversary\nr = 0.5\nhammer = literal\n")).unwrap();
        let g = cfg.build_graph().unwrap();
        assert!(matches!(
            cfg.scheduler_spec(&g).unwrap(),
            SchedulerSpec::AdversarialAdaptive { hammer: HammerRule::Literal, .. }
        ));
        let cfg = parse(&format!("{MINIMAL}[scheduler]\nkind = periodic\ngroups = 0; 1\norder = 1,0\n")).unwrap();
        assert_eq!(cfg.scheduler_spec(&g).unwrap().period(), Some(2));
        let cfg = parse(&format!("{MINIMAL}[scheduler]\nkind = contagion\nwalk = file\n")).unwrap();
        assert!(cfg.scheduler_spec(&g).is_err());
    }

    #[test]
    fn pilot_beta_and_lists() {
        let cfg = parse(&format!(
            "{}[run]\nsizes = 16, 32,64\n",
            MINIMAL.replace("beta = 1", "beta = pilot")
        ))
        .unwrap();
        assert_eq!(cfg.beta, BetaSetting::Pilot);
        assert!(cfg.fixed_beta().is_err());
        assert_eq!(cfg.sizes, Some(vec![16, 32, 64]));
    }
}
