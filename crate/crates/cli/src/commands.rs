//! One function per subcommand. Each writes its CSV files to the output
//! directory and returns the human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use normdiff::dynamics::{run, CsvTrace, StoppingRule, TraceRecord, TraceSink};
use normdiff::exact::{
    build_chain, detailed_balance_check, gibbs, report_csv, resistance_digraph, stable_states, stationary, ChainKind,
};
use normdiff::experiments::{
    adversary_containment, default_budget, inertia_csv, p_inertia_mc, pilot_beta, scaling_csv, scaling_experiment,
    InertiaEstimate, ScalingSettings, StartPolicy, PILOT_BETAS,
};
use normdiff::graph::{is_rk_close_knit, CloseKnitVerdict, VertexSearch, DEFAULT_SUBSET_BUDGET};
use normdiff::rng::rng_from_seed;
use normdiff::scheduler::{fairness_whp_estimate, HammerRule, RoundTracker};
use normdiff::{Beta, ModelParams, SchedulerSpec, WeightedGraph};

use crate::config::{BetaSetting, RunConfig, SchedulerChoice};
use crate::CliError;

const DEFAULT_STOP: StoppingRule = StoppingRule::Steps(100);
const DEFAULT_SIM_BUDGET: u64 = 100_000_000;
const DEFAULT_REPLICAS: usize = 50;
const DEFAULT_HORIZON: u64 = 1_000_000;
const DEFAULT_ROUNDS: usize = 1_000;

/// Everything a command needs besides its parsed config.
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `# version, config hash, seed` line closing every CSV.
    pub metadata: String,
}

impl Context {
    fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(name);
        let mut text = body.to_string();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&self.metadata);
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn graph(&self) -> Result<WeightedGraph, CliError> {
        self.config.build_graph()
    }

    fn params(&self) -> Result<ModelParams, CliError> {
        Ok(ModelParams::new(self.config.fixed_beta()?)?)
    }

    fn finite_beta(&self) -> Result<f64, CliError> {
        match self.config.fixed_beta()? {
            Beta::Finite(b) => Ok(b),
            Beta::Infinite => Err(CliError::Validation("[model] beta: exact analysis needs a finite beta".into())),
        }
    }

    fn require<T: Copy>(&self, value: Option<T>, key: &str) -> Result<T, CliError> {
        value.ok_or_else(|| CliError::Validation(format!("[run] {key}: missing")))
    }
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

/// Forwards records to the CSV writer and tracks completed rounds.
struct SimulateSink {
    csv: CsvTrace<Vec<u8>>,
    rounds: RoundTracker,
}

impl TraceSink for SimulateSink {
    fn record(&mut self, rec: &TraceRecord) {
        self.csv.record(rec);
        self.rounds.push(rec.vertex);
    }

    fn wants_potential(&self) -> bool {
        true
    }
}

pub fn simulate(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let n = graph.n();
    let spec = ctx.config.scheduler_spec(&graph)?;
    let params = ctx.params()?;
    let stop = ctx.config.stop.unwrap_or(DEFAULT_STOP);
    let budget = ctx.config.budget.unwrap_or(match stop {
        StoppingRule::Steps(t) => t,
        _ => DEFAULT_SIM_BUDGET,
    });
    let initial = ctx.config.initial_config(n)?;
    let mut sink = SimulateSink {
        csv: CsvTrace::new(Vec::new()),
        rounds: RoundTracker::new(n),
    };
    let mut rng = rng_from_seed(ctx.seed);
    let out = run(&graph, initial, &spec, &params, &ctx.config.payoff, stop, budget, &mut rng, &mut sink)?;
    let bytes = sink
        .csv
        .finish()
        .map_err(|e| CliError::Runtime(format!("trace: {e}")))?;
    let path = ctx.write_csv("trace.csv", &String::from_utf8_lossy(&bytes))?;
    let mut s = String::new();
    writeln!(s, "graph {} (n = {n}), scheduler {}, beta {}", ctx.config.graph_id(), spec.kind(), params.beta).unwrap();
    writeln!(s, "steps {}{}", out.steps, if out.truncated { " (budget exhausted)" } else { "" }).unwrap();
    writeln!(s, "final A-fraction {:.6}", out.config.count_a() as f64 / n as f64).unwrap();
    writeln!(s, "final configuration {}", out.config).unwrap();
    writeln!(s, "completed rounds {}", sink.rounds.completed()).unwrap();
    writeln!(s, "trace {}", display_path(&path)).unwrap();
    Ok(s)
}

pub fn exact_stationary(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let beta = ctx.finite_beta()?;
    let spec = ctx.config.scheduler_spec(&graph)?;
    let kind = ChainKind::from_spec(&spec)?;
    let payoff = &ctx.config.payoff;
    let chain = build_chain(&graph, payoff, Beta::Finite(beta), &kind)?;
    let mu = stationary(&chain)?;
    let path = ctx.write_csv(
        "stationary.csv",
        &report_csv(chain.states(), graph.n(), &graph, payoff, Some(&mu), None),
    )?;
    let mut s = String::new();
    writeln!(s, "states {}, irreducible {}, aperiodic {}", chain.len(), chain.is_irreducible(), chain.is_aperiodic())
        .unwrap();
    let top = (0..mu.len()).max_by(|&a, &b| mu[a].total_cmp(&mu[b])).unwrap_or(0);
    writeln!(s, "most likely state {} with mass {:.6e}", chain.states()[top].label(graph.n()), mu[top]).unwrap();
    if payoff.is_potential_game() && !matches!(kind, ChainKind::Contagion { .. }) {
        let gb = gibbs(&graph, payoff, beta)?;
        let dist = mu.iter().zip(&gb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        writeln!(s, "max |stationary - gibbs| {dist:.3e}").unwrap();
        if kind == ChainKind::Random {
            let db = detailed_balance_check(&chain, &graph, payoff, beta)?;
            writeln!(
                s,
                "detailed balance over {} pairs: residual {:.3e}, reversed orientation {:.3e}",
                db.pairs, db.max_violation, db.max_violation_reversed
            )
            .unwrap();
        }
    }
    writeln!(s, "report {}", display_path(&path)).unwrap();
    Ok(s)
}

pub fn stable_states_cmd(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let spec = ctx.config.scheduler_spec(&graph)?;
    let kind = ChainKind::from_spec(&spec)?;
    let payoff = &ctx.config.payoff;
    let digraph = resistance_digraph(&graph, payoff, &kind)?;
    let rep = stable_states(&digraph)?;
    let path = ctx.write_csv(
        "stable_states.csv",
        &report_csv(&digraph.states, graph.n(), &graph, payoff, None, Some(&rep)),
    )?;
    let labels: Vec<String> = rep.stable.iter().map(|&i| digraph.states[i].label(graph.n())).collect();
    let mut s = String::new();
    writeln!(s, "states {}, minimum tree resistance {}", digraph.states.len(), rep.min_resistance).unwrap();
    writeln!(s, "stochastically stable: {}", labels.join(" ")).unwrap();
    writeln!(s, "matches all-A prediction: {}", rep.matches_prediction()).unwrap();
    writeln!(s, "report {}", display_path(&path)).unwrap();
    Ok(s)
}

pub fn close_knit(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let r = ctx.require(ctx.config.r, "r")?;
    let k = ctx.require(ctx.config.k, "k")?;
    let budget = ctx.config.budget.unwrap_or(DEFAULT_SUBSET_BUDGET);
    let search = is_rk_close_knit(&graph, r, k, budget)?;
    let mut csv = String::from("vertex,result,set,min_ratio\n");
    for (v, res) in search.per_vertex.iter().enumerate() {
        match res {
            VertexSearch::Found(rep) => {
                let set: Vec<String> = rep.set.iter().map(|x| x.to_string()).collect();
                writeln!(csv, "{v},found,{},{}", set.join(" "), rep.min_ratio).unwrap();
            }
            VertexSearch::NotFound => writeln!(csv, "{v},none,,").unwrap(),
            VertexSearch::Exhausted => writeln!(csv, "{v},budget,,").unwrap(),
        }
    }
    let path = ctx.write_csv("close_knit.csv", &csv)?;
    let verdict = match search.verdict {
        CloseKnitVerdict::Yes => "yes",
        CloseKnitVerdict::No => "no",
        CloseKnitVerdict::Indeterminate => "indeterminate (subset budget exhausted)",
    };
    Ok(format!(
        "({r}, {k})-close-knit: {verdict}\nreport {}\n",
        display_path(&path)
    ))
}

fn start_policy(starts: Option<usize>, default: usize) -> StartPolicy {
    match starts.unwrap_or(default) {
        0 => StartPolicy::AllB,
        k => StartPolicy::AllBPlusRandom { k },
    }
}

/// Resolves `beta = pilot` on `graph`, returning the level and a note.
fn resolve_beta(
    ctx: &Context,
    graph: &WeightedGraph,
    spec: &SchedulerSpec,
    p: f64,
    replicas: usize,
) -> Result<(ModelParams, Option<String>), CliError> {
    match ctx.config.beta {
        BetaSetting::Fixed(b) => Ok((ModelParams::new(b)?, None)),
        BetaSetting::Pilot => {
            let budget = ctx.config.budget.unwrap_or_else(|| default_budget(graph.n(), spec));
            let (beta, tried) = pilot_beta(graph, &ctx.config.payoff, spec, p, &PILOT_BETAS, replicas, budget, ctx.seed)?;
            let tried: Vec<String> = tried.iter().map(|(b, c)| format!("{b}: {:.1}%", 100.0 * c)).collect();
            match beta {
                Some(b) => Ok((ModelParams::finite(b)?, Some(format!("pilot beta {b} (censoring {})", tried.join(", "))))),
                None => Err(CliError::Censored(format!(
                    "no pilot beta reaches censoring below 5% (censoring {})",
                    tried.join(", ")
                ))),
            }
        }
    }
}

fn describe(est: &InertiaEstimate) -> String {
    match (est.mean(), est.ci_half_width()) {
        (Some(m), Some(h)) => format!("{m:.3} +/- {h:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "unusable (all runs censored)".to_string(),
    }
}

pub fn inertia(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let spec = ctx.config.scheduler_spec(&graph)?;
    let p = ctx.require(ctx.config.p, "p")?;
    let replicas = ctx.config.replicas.unwrap_or(DEFAULT_REPLICAS);
    let (params, note) = resolve_beta(ctx, &graph, &spec, p, replicas)?;
    let budget = ctx.config.budget.unwrap_or_else(|| default_budget(graph.n(), &spec));
    let policy = start_policy(ctx.config.starts, normdiff::experiments::DEFAULT_RANDOM_STARTS);
    let id = ctx.config.graph_id();
    let est = p_inertia_mc(&graph, &id, &ctx.config.payoff, &spec, &params, p, policy, replicas, budget, ctx.seed)?;
    let family = id.split(':').next().unwrap_or(&id);
    let path = ctx.write_csv("inertia.csv", &inertia_csv([(family, graph.n(), &est)]))?;
    let mut s = String::new();
    if let Some(note) = note {
        writeln!(s, "{note}").unwrap();
    }
    writeln!(s, "graph {id}, scheduler {}, beta {}, p {p}, starts {policy}", spec.kind(), params.beta).unwrap();
    writeln!(s, "p-inertia {}", describe(&est)).unwrap();
    writeln!(s, "all-B start {}", match est.all_b().mean {
        Some(m) => format!("{m:.3}"),
        None => "censored".into(),
    })
    .unwrap();
    writeln!(s, "censored {} of {} runs (budget {budget} steps)", est.censored(), est.total_runs()).unwrap();
    writeln!(s, "report {}", display_path(&path)).unwrap();
    if est.is_unusable() {
        return Err(CliError::Censored(s));
    }
    Ok(s)
}

pub fn scaling(ctx: &Context) -> Result<String, CliError> {
    let family = ctx.config.family()?.clone();
    let sizes = ctx
        .config
        .sizes
        .clone()
        .ok_or_else(|| CliError::Validation("[run] sizes: missing".into()))?;
    let p = ctx.require(ctx.config.p, "p")?;
    let replicas = ctx.config.replicas.unwrap_or(DEFAULT_REPLICAS);
    let first = sizes
        .first()
        .ok_or_else(|| CliError::Validation("[run] sizes: empty".into()))?;
    let smallest = family.with_size(*first).build()?;
    let spec_for = |g: &WeightedGraph| -> normdiff::Result<SchedulerSpec> {
        ctx.config.scheduler_spec(g).map_err(|e| normdiff::Error::Invalid(e.to_string()))
    };
    let (params, note) = resolve_beta(ctx, &smallest, &spec_for(&smallest)?, p, replicas)?;
    let settings = ScalingSettings {
        params,
        p,
        policy: start_policy(ctx.config.starts, 0),
        replicas,
        budget: ctx.config.budget,
        seed: ctx.seed,
    };
    let rep = scaling_experiment(&family, &sizes, &ctx.config.payoff, spec_for, &settings)?;
    let rows: Vec<(&str, usize, &InertiaEstimate)> =
        rep.sizes.iter().zip(&rep.estimates).map(|(&n, e)| (rep.family.as_str(), n, e)).collect();
    let inertia_path = ctx.write_csv("inertia.csv", &inertia_csv(rows))?;
    let scaling_path = ctx.write_csv("scaling.csv", &scaling_csv([&rep]))?;
    let mut s = String::new();
    if let Some(note) = note {
        writeln!(s, "{note}").unwrap();
    }
    for (n, e) in rep.sizes.iter().zip(&rep.estimates) {
        writeln!(s, "n = {n}: p-inertia {} (censored {}/{})", describe(e), e.censored(), e.total_runs()).unwrap();
    }
    match rep.fit {
        Some(f) => writeln!(
            s,
            "log-log slope {:.4} (stderr {:.4}), intercept {:.4}",
            f.slope, f.slope_stderr, f.intercept
        )
        .unwrap(),
        None => writeln!(s, "log-log slope unavailable").unwrap(),
    }
    writeln!(s, "reports {} {}", display_path(&inertia_path), display_path(&scaling_path)).unwrap();
    if !rep.unusable_sizes().is_empty() {
        writeln!(s, "sizes with every run censored: {:?}", rep.unusable_sizes()).unwrap();
        return Err(CliError::Censored(s));
    }
    Ok(s)
}

pub fn adversary(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let n = graph.n();
    let params = ctx.params()?;
    let (sched_r, hammer) = match &ctx.config.scheduler {
        SchedulerChoice::Adversary { r, hammer, .. } => (Some(*r), *hammer),
        _ => (None, HammerRule::Containing),
    };
    let r = ctx
        .config
        .r
        .or(sched_r)
        .ok_or_else(|| CliError::Validation("[run] r: missing".into()))?;
    let horizon = ctx.config.horizon.unwrap_or(DEFAULT_HORIZON);
    let replicas = ctx.config.replicas.unwrap_or(DEFAULT_REPLICAS);
    let rep = adversary_containment(&graph, &ctx.config.payoff, &params, r, hammer, horizon, replicas, ctx.seed)?;
    let tails: Vec<String> = rep.tail.iter().map(|(_, g)| g.to_string()).collect();
    let csv = format!(
        "n,r,beta,horizon,replicas,max_fraction,exceedances,g1,g2,g4,g8,hammer_cap_hits\n{n},{r},{},{horizon},{replicas},{},{},{},{}\n",
        params.beta,
        rep.max_fraction,
        rep.exceedances,
        tails.join(","),
        rep.hammer_cap_hits
    );
    let path = ctx.write_csv("containment.csv", &csv)?;
    let mut s = String::new();
    writeln!(s, "r {r}, hammer {hammer:?}, beta {}, horizon {horizon}, replicas {replicas}", params.beta).unwrap();
    writeln!(s, "max A-fraction {:.6}, exceedances {}", rep.max_fraction, rep.exceedances).unwrap();
    for (eps, g) in &rep.tail {
        writeln!(s, "rounds longer than {eps} n ln n: {g:.6}").unwrap();
    }
    writeln!(s, "hammer cap hits {}", rep.hammer_cap_hits).unwrap();
    if let Some((replica, trace)) = &rep.first_exceedance {
        let mut sink = CsvTrace::new(Vec::new());
        for t in trace {
            sink.record(t);
        }
        let bytes = sink.finish().map_err(|e| CliError::Runtime(format!("trace: {e}")))?;
        let p = ctx.write_csv("exceedance_trace.csv", &String::from_utf8_lossy(&bytes))?;
        writeln!(s, "first exceedance in replica {replica}; trace prefix {}", display_path(&p)).unwrap();
    }
    writeln!(s, "report {}", display_path(&path)).unwrap();
    Ok(s)
}

pub fn fairness(ctx: &Context) -> Result<String, CliError> {
    let graph = ctx.graph()?;
    let n = graph.n();
    let spec = ctx.config.scheduler_spec(&graph)?;
    let params = ctx.params()?;
    let rounds = ctx.config.rounds.unwrap_or(DEFAULT_ROUNDS);
    let budget = ctx.config.budget.unwrap_or(DEFAULT_SIM_BUDGET);
    let f_n = n as f64 * (n as f64).ln();
    let rep = fairness_whp_estimate(&spec, &graph, &ctx.config.payoff, &params, f_n, rounds, budget, ctx.seed)?;
    let mut csv = String::from("round,length\n");
    for (i, l) in rep.round_lengths.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    let path = ctx.write_csv("fairness.csv", &csv)?;
    let mut s = String::new();
    writeln!(s, "scheduler {}, rounds {}, steps {}, f(n) = n ln n = {f_n:.3}", spec.kind(), rep.round_lengths.len(), rep.steps)
        .unwrap();
    for (eps, g) in &rep.tail {
        writeln!(s, "rounds longer than {eps} f(n): {g:.6}").unwrap();
    }
    match rep.c_estimate {
        Some(c) => writeln!(s, "per-pass scheduling constant estimate {c:.4}").unwrap(),
        None => writeln!(s, "per-pass scheduling constant: undefined for adaptive schedulers").unwrap(),
    }
    writeln!(s, "report {}", display_path(&path)).unwrap();
    Ok(s)
}
