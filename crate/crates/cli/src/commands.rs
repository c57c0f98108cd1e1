//! Subcommand bodies and artifact bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hedgegame::dual::{self, ControlLattice, DualError};
use hedgegame::game::{self, Adversary, GameError, HedgeSource, SimParams, SimReport};
use hedgegame::hjb::{self, GridSpec, HjbError, SurfaceField, ValueSurface};
use hedgegame::model::{validate_assumptions, ModelError, ModelSpec};
use hedgegame::regularize::{self, BoxSet, RegularizeError, SmoothSurface, Target};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Format, RunConfig};
use crate::{plot, CliError};

const VALIDATION_SAMPLES: usize = 256;
const VALIDATION_SEED: u64 = 0;

fn model_err(e: ModelError) -> CliError {
    CliError::Numerical(e.to_string())
}

fn hjb_err(e: HjbError) -> CliError {
    let m = e.to_string();
    match e {
        HjbError::Grid(_) | HjbError::OutOfBounds { .. } | HjbError::Format(_) => CliError::Config(m),
        HjbError::Cfl { .. } | HjbError::NonConvergence { .. } | HjbError::Model(_) => CliError::Numerical(m),
        HjbError::Io(_) => CliError::Io(m),
    }
}

fn reg_err(e: RegularizeError) -> CliError {
    let m = e.to_string();
    match e {
        RegularizeError::Hjb(h) => hjb_err(h),
        RegularizeError::Model(_) => CliError::Numerical(m),
        RegularizeError::Invalid(_) => CliError::Config(m),
        RegularizeError::Precondition { .. } | RegularizeError::Exhausted { .. } => CliError::Certification(m),
    }
}

fn game_err(e: GameError) -> CliError {
    match e {
        GameError::Model(m) => model_err(m),
        GameError::Invalid(m) => CliError::Config(m),
    }
}

fn dual_err(e: DualError) -> CliError {
    let m = e.to_string();
    match e {
        DualError::Invalid(_) => CliError::Config(m),
        DualError::Model(_) | DualError::NonFinite { .. } => CliError::Numerical(m),
    }
}

/// Output directory, config hash, and the artifacts written so far.
struct Run {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
    artifacts: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
    seeds: BTreeMap<&'static str, u64>,
    started: Instant,
    started_unix: f64,
}

impl Run {
    fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.output.directory);
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut seeds = BTreeMap::new();
        seeds.insert("validation", VALIDATION_SEED);
        Ok(Self { hash: cfg.hash(), cfg, dir, artifacts: Vec::new(), inputs: Vec::new(), seeds, started: Instant::now(), started_unix })
    }

    fn wants(&self, f: Format) -> bool {
        self.cfg.output.wants(f)
    }

    /// Relative inputs are looked up in the output directory.
    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    /// Notes an input file and its digest in the manifest.
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.inputs.push((path.display().to_string(), hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.dir.join(name))?;
        self.artifacts.push((name.to_string(), hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.record(name)
    }

    /// JSON artifact carrying the config hash.
    fn write_json(&mut self, name: &str, body: impl Serialize) -> Result<(), CliError> {
        if !self.wants(Format::Json) {
            return Ok(());
        }
        let mut v = serde_json::to_value(body).map_err(|e| CliError::Io(e.to_string()))?;
        match &mut v {
            Value::Object(m) => {
                m.insert("config_hash".into(), json!(self.hash));
            }
            other => *other = json!({"config_hash": self.hash, "value": other.clone()}),
        }
        let text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_with(name, |w| writeln!(w, "{text}"))
    }

    fn finish(&mut self, command: &str, status: &str) -> Result<(), CliError> {
        let list = |v: &[(String, String)]| -> Vec<Value> { v.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect() };
        let manifest = json!({
            "command": command,
            "status": status,
            "config_hash": self.hash,
            "config": self.cfg,
            "versions": {"hedgegame": env!("CARGO_PKG_VERSION")},
            "seeds": self.seeds,
            "threads": rayon::current_num_threads(),
            "started_unix": self.started_unix,
            "wall_time_s": self.started.elapsed().as_secs_f64(),
            "inputs": list(&self.inputs),
            "artifacts": list(&self.artifacts),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        // one manifest per command, so chained runs in one directory keep
        // the record of every artifact
        let path = self.dir.join(format!("manifest.{command}.json"));
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// Builds the model and rejects assumption violations.
fn build_model(cfg: &RunConfig) -> Result<ModelSpec, CliError> {
    let model = cfg.model.build().map_err(|e| CliError::Config(e.to_string()))?;
    let report = validate_assumptions(&model, VALIDATION_SAMPLES, VALIDATION_SEED);
    let bad: Vec<String> = report
        .violations()
        .map(|c| {
            let at = c.witness.as_ref().map(|w| format!(" ({})", w.detail)).unwrap_or_default();
            format!("{:?}: worst {:.4e}{at}", c.id, c.worst)
        })
        .collect();
    if !bad.is_empty() {
        return Err(CliError::Config(format!("assumption violated: {}", bad.join("; "))));
    }
    Ok(model)
}

fn grid(cfg: &RunConfig) -> GridSpec {
    cfg.grid.spec(cfg.model.horizon_t)
}

/// `(t0, x0)` inside `[0, T] x box`.
fn start_point(cfg: &RunConfig, g: &GridSpec) -> Result<(f64, Vec<f64>), CliError> {
    let t0 = cfg.point.t0;
    let x0 = cfg.x0();
    let inside = (g.t_start..=g.t_end).contains(&t0)
        && x0.iter().enumerate().all(|(j, v)| (g.x_min[j]..=g.x_max[j]).contains(v));
    if !inside {
        return Err(CliError::Config(format!("point ({t0}, {x0:?}) outside the grid")));
    }
    Ok((t0, x0))
}

fn solve(model: &ModelSpec, g: &GridSpec) -> Result<ValueSurface, CliError> {
    hjb::solve(model, g).map_err(hjb_err)
}

pub fn run(command: &str, cfg: RunConfig) -> Result<(), CliError> {
    let mut run = Run::new(cfg)?;
    let outcome = match command {
        "price" => price(&mut run, false),
        "solve" => price(&mut run, true),
        "regularize" => regularize_cmd(&mut run),
        "simulate" => simulate_cmd(&mut run),
        "dual" => dual_cmd(&mut run),
        other => Err(CliError::Config(format!("unknown command {other}"))),
    };
    match &outcome {
        Ok(()) => run.finish(command, "ok")?,
        // failed acceptance still leaves a complete record
        Err(CliError::Certification(_)) => run.finish(command, "fail")?,
        Err(_) => {}
    }
    outcome
}

fn price(run: &mut Run, write_surface: bool) -> Result<(), CliError> {
    let model = build_model(&run.cfg)?;
    let g = grid(&run.cfg);
    let (t0, x0) = start_point(&run.cfg, &g)?;
    let surface = solve(&model, &g)?;
    let value = surface.at_time(t0).value(&x0);
    println!("{value:?}");
    if !write_surface {
        return run.write_json(
            "price.json",
            json!({"t0": t0, "x0": x0, "value": value, "grid_hash": g.hash(), "model_hash": model.hash()}),
        );
    }
    hjb::write_surface(&run.dir.join("surface.bin"), &surface).map_err(hjb_err)?;
    run.record("surface.bin")?;
    if run.wants(Format::Csv) {
        run.write_with("surface.csv", |w| {
            hjb::write_surface_csv(w, &surface).map_err(|e| std::io::Error::other(e.to_string()))
        })?;
    }
    let residual = hjb::residual(&surface, &model).map_err(hjb_err)?.summary();
    run.write_json(
        "solve.json",
        json!({
            "t0": t0,
            "x0": x0,
            "value": value,
            "residual": residual,
            "stats": surface.stats(),
            "grid_hash": g.hash(),
            "model_hash": model.hash(),
        }),
    )?;
    if run.wants(Format::Tsv) {
        run.write_with("value_slice.tsv", |w| plot::value_slice(w, &surface, &g, t0))?;
        run.write_with("policy_map.tsv", |w| plot::policy_map(w, &surface))?;
    }
    Ok(())
}

/// Reads a surface CSV written by `solve`; rows are in node order.
fn surface_from_csv(path: &Path, horizon: f64) -> Result<ValueSurface, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| CliError::Config(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').collect();
    if head.len() < 5 || head[0] != "t_index" || head[head.len() - 2] != "value" {
        return Err(bad("not a surface CSV"));
    }
    let d = head.len() - 4;
    let mut ts: Vec<f64> = Vec::new();
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut values = Vec::new();
    for line in lines {
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("unparsable row"))?;
        if f.len() != d + 4 {
            return Err(bad("ragged row"));
        }
        if ts.last() != Some(&f[1]) {
            ts.push(f[1]);
        }
        for j in 0..d {
            if !axes[j].contains(&f[2 + j]) {
                axes[j].push(f[2 + j]);
            }
        }
        values.push(f[2 + d]);
    }
    if ts.len() < 2 || axes.iter().any(|a| a.len() < 3) {
        return Err(bad("too few nodes"));
    }
    let lo: Vec<f64> = axes.iter().map(|a| a.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = axes.iter().map(|a| a.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let steps: Vec<usize> = axes.iter().map(|a| a.len() - 1).collect();
    let (t_first, t_last) = (ts[0], ts[ts.len() - 1]);
    if (t_last - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(bad("surface does not end at the model horizon"));
    }
    let g = GridSpec::new(t_last, ts.len() - 1, lo, hi, steps).with_t_start(t_first);
    ValueSurface::tabulated(g, values).map_err(hjb_err)
}

enum Loaded {
    Grid(ValueSurface),
    Smooth(SmoothSurface),
}

impl Loaded {
    fn source(&self) -> HedgeSource<'_> {
        match self {
            Loaded::Grid(s) => HedgeSource::Grid(s),
            Loaded::Smooth(s) => HedgeSource::Smooth(s),
        }
    }
}

/// Grid or smooth cache, told apart by the file magic; `.csv` is parsed.
fn load_surface(path: &Path, horizon: f64) -> Result<Loaded, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        return surface_from_csv(path, horizon).map(Loaded::Grid);
    }
    let mut magic = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if &magic == b"HJBSURF1" {
        hjb::read_surface(path).map(Loaded::Grid).map_err(hjb_err)
    } else {
        regularize::read_smooth(path).map(Loaded::Smooth).map_err(hjb_err)
    }
}

fn regularize_cmd(run: &mut Run) -> Result<(), CliError> {
    let model = build_model(&run.cfg)?;
    let g = grid(&run.cfg);
    let rc = run.cfg.regularize.clone();
    let b_set = rc.b_box.clone().unwrap_or_else(|| BoxSet::central(&g, 0.5));
    let phi_surface;
    let phi_fn;
    let target = match rc.phi.strip_prefix("v-plus-margin:") {
        Some(m) => Target::ValuePlusMargin(
            m.parse().map_err(|_| CliError::Config(format!("bad margin in phi `{}`", rc.phi)))?,
        ),
        None => {
            let path = run.resolve(&rc.phi);
            phi_surface = load_surface(&path, model.horizon())?;
            run.input(&path)?;
            let field = phi_surface.source().field();
            phi_fn = move |t: f64, x: &[f64]| field.at_time(t).value(x);
            Target::Function(&phi_fn)
        }
    };
    let built = regularize::build_smooth_supersolution(&model, &g, target, &b_set, rc.eta, &rc.options()).map_err(reg_err)?;
    regularize::write_smooth(&run.dir.join("smooth.bin"), &built.surface).map_err(hjb_err)?;
    run.record("smooth.bin")?;
    run.write_json("certificate.json", &built.report)?;
    if run.wants(Format::Tsv) {
        run.write_with("eps_curve.tsv", |w| plot::eps_curve(w, &built.report.eps_curve))?;
        let t0 = run.cfg.point.t0;
        run.write_with("smooth_slice.tsv", |w| plot::value_slice(w, &built.surface, &g, t0))?;
    }
    let c = &built.report.certificate;
    println!(
        "certified eps={} delta={:e} min_residual={:.3e} terminal_margin={:.3e}",
        built.report.eps, built.report.delta, c.min_residual, c.terminal_margin
    );
    if !c.passed {
        return Err(CliError::Certification(format!("certificate failed: min residual {:.3e}", c.min_residual)));
    }
    Ok(())
}

enum Plan {
    All,
    One(String),
}

fn simulate_cmd(run: &mut Run) -> Result<(), CliError> {
    let model = build_model(&run.cfg)?;
    let sc = run.cfg.sim.clone();
    run.seeds.insert("sim", sc.seed);
    let g = grid(&run.cfg);
    let loaded = if sc.surface.is_empty() {
        log::info!("no surface given; solving on the configured grid");
        Loaded::Grid(solve(&model, &g)?)
    } else {
        let path = run.resolve(&sc.surface);
        let s = load_surface(&path, model.horizon())?;
        run.input(&path)?;
        s
    };
    let source = loaded.source();
    let field = source.field();
    let t0 = run.cfg.point.t0;
    let x0 = run.cfg.x0();
    let (lo, hi) = field.x_bounds();
    let (ta, tb) = field.t_range();
    if !(ta..=tb).contains(&t0) || x0.iter().enumerate().any(|(j, v)| !(lo[j]..=hi[j]).contains(v)) {
        return Err(CliError::Config(format!("start ({t0}, {x0:?}) outside the surface")));
    }
    let y0 = match sc.y0.as_str() {
        "auto" => field.at_time(t0).value(&x0) + sc.margin,
        v => v.parse::<f64>().map_err(|_| CliError::Config(format!("bad y0 `{v}`")))?,
    };
    let mut params = SimParams {
        n_paths: sc.paths,
        n_steps: sc.steps,
        seed: sc.seed,
        tol_sim: sc.tol_sim,
        p_sim: sc.p_sim,
        switch_rate: sc.switch_rate,
    };
    let na = model.a_points().len();
    let plan = if sc.adversary == "all" { Plan::All } else { Plan::One(sc.adversary.clone()) };
    let strategy = game::make_strategy(field, &model).map_err(game_err)?;
    let worst = source.worst_policy(&model);
    let advs: Vec<Adversary<'_>> = match &plan {
        // the suite of the superhedge check: every constant point, the
        // random switcher and the worst-case feedback
        Plan::All => {
            let mut v: Vec<Adversary<'_>> = (0..na).map(Adversary::Constant).collect();
            v.push(Adversary::PiecewiseRandom { switch_rate: params.switch_rate });
            v.push(Adversary::MarkovWorst(worst.as_ref()));
            v
        }
        Plan::One(spec) => vec![match spec.split_once(':') {
            Some(("constant", i)) => {
                Adversary::Constant(i.parse().map_err(|_| CliError::Config(format!("bad adversary `{spec}`")))?)
            }
            Some(("random", r)) => {
                params.switch_rate = r.parse().map_err(|_| CliError::Config(format!("bad adversary `{spec}`")))?;
                Adversary::PiecewiseRandom { switch_rate: params.switch_rate }
            }
            None if spec == "worst" => Adversary::MarkovWorst(worst.as_ref()),
            _ => return Err(CliError::Config(format!("unknown adversary `{spec}`"))),
        }],
    };
    let mut reports: Vec<SimReport> = Vec::new();
    let mut hist: Vec<(String, Vec<f64>)> = Vec::new();
    for adv in advs {
        let sim = game::simulate(&model, &strategy, adv, t0, &x0, y0, &params).map_err(game_err)?;
        let label = sim.report.adversary.clone();
        if sc.write_paths && run.wants(Format::Csv) {
            let name = match plan {
                Plan::All => format!("paths_{}.csv", label.replace([':', '.'], "_")),
                Plan::One(_) => "paths.csv".into(),
            };
            let paths = &sim.paths;
            run.write_with(&name, |w| {
                write!(w, "path_id")?;
                for j in 0..x0.len() {
                    write!(w, ",x{j}_T")?;
                }
                writeln!(w, ",y_T,shortfall")?;
                for p in paths {
                    write!(w, "{}", p.path)?;
                    for v in &p.x {
                        write!(w, ",{v:?}")?;
                    }
                    writeln!(w, ",{:?},{:?}", p.y, p.shortfall)?;
                }
                Ok(())
            })?;
        }
        hist.push((label, sim.paths.iter().map(|p| p.shortfall).collect()));
        reports.push(sim.report);
    }
    let passed = reports.iter().all(|r| r.shortfall_prob <= params.p_sim && r.non_finite == 0);
    for r in &reports {
        println!(
            "{}\tshortfall_mean={:.4e}\tP(shortfall>{})={:.4}",
            r.adversary, r.shortfall_mean, r.tol, r.shortfall_prob
        );
    }
    match plan {
        Plan::All => run.write_json(
            "simulate.json",
            game::HedgeCheck { passed, y0, margin: sc.margin, p_sim: params.p_sim, reports: reports.clone() },
        )?,
        Plan::One(_) => {
            let mut v = serde_json::to_value(&reports[0]).map_err(|e| CliError::Io(e.to_string()))?;
            v["passed"] = json!(passed);
            v["p_sim"] = json!(params.p_sim);
            run.write_json("simulate.json", v)?;
        }
    }
    if run.wants(Format::Tsv) {
        run.write_with("shortfall_hist.tsv", |w| plot::shortfall_histograms(w, &hist))?;
    }
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if !passed {
        return Err(CliError::Certification(format!(
            "hedge from y0 = {y0} exceeds the shortfall probability {}",
            params.p_sim
        )));
    }
    Ok(())
}

fn dual_cmd(run: &mut Run) -> Result<(), CliError> {
    let model = build_model(&run.cfg)?;
    let dc = run.cfg.dual.clone();
    run.seeds.insert("dual", dc.seed);
    let t0 = run.cfg.point.t0;
    let x0 = run.cfg.x0();
    let lattice = ControlLattice::uniform(&model, dc.eps, t0, dc.knots, dc.gamma_grid)
        .map_err(dual_err)?
        .with_euler_steps(dc.euler_steps);
    let est = dual::dual_value_lsmc(&model, dc.eps, t0, &x0, &lattice, dc.degree, dc.paths, dc.seed).map_err(dual_err)?;
    println!("{:?}\t{:?}", est.value, est.std_error);
    let dpp = match dc.mid {
        Some(mid) => {
            let r = dual::dpp_check_with_degree(&model, dc.eps, t0, &x0, mid, &lattice, dc.degree, dc.paths, dc.seed)
                .map_err(dual_err)?;
            println!("dpp difference={:.4e} tolerance={:.4e} {}", r.difference, r.tolerance, if r.passed { "PASS" } else { "FAIL" });
            Some(r)
        }
        None => None,
    };
    let mut body = serde_json::to_value(&est).map_err(|e| CliError::Io(e.to_string()))?;
    body["eps"] = json!(dc.eps);
    body["t0"] = json!(t0);
    body["x0"] = json!(x0);
    body["time_knots"] = json!(lattice.time_knots);
    body["gamma_points"] = json!(lattice.gamma_points);
    if let Some(r) = &dpp {
        body["dpp"] = json!(r);
    }
    run.write_json("dual.json", body)?;
    if let Some(r) = dpp {
        if !r.passed {
            return Err(CliError::Certification(format!(
                "dynamic-programming check failed: difference {:.4e} > {:.4e}",
                r.difference, r.tolerance
            )));
        }
    }
    Ok(())
}
