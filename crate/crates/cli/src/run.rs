//! Command implementations. Each command reads every setting it needs before
//! computing anything, and returns its artifacts in memory; nothing touches
//! the output directory until the whole run has succeeded.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use newtonflow::equivalence::{equivalence_experiment, lemma_halving, ExperimentSpec};
use newtonflow::fields::builtin::{builtin_field, needs_dataset, KEYS};
use newtonflow::glm::{bartlett_check, fisher_scoring_solve, glm_simulate, CovariateLaw, GlmDataset};
use newtonflow::io::{fmt_num, indices_at, write_comparisons, write_dataset, write_dataset_meta, write_density, write_ensemble, write_moments, write_section};
use newtonflow::particles::{advance_ensemble, sample_initial, step_count, InitLaw, Method, Smoothing};
use newtonflow::transport::{gaussian_density, solve_transport, SubstepPolicy, TransportRun};
use newtonflow::{GridSpec, VelocityField};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    SimulateParticles,
    SolvePde,
    Compare,
    GlmDemo,
    LemmaTests,
    Momenta,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SimulateParticles => "simulate-particles",
            Command::SolvePde => "solve-pde",
            Command::Compare => "compare",
            Command::GlmDemo => "glm-demo",
            Command::LemmaTests => "lemma-tests",
            Command::Momenta => "momenta",
        }
    }
}

/// Everything a successful run produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub notes: Vec<(String, String)>,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    fn file<F>(&mut self, name: impl Into<String>, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn manifest(&self) -> String {
        let mut m = String::from("# newtonflow run manifest\n");
        m += &format!("tool = newtonflow {}\n", env!("CARGO_PKG_VERSION"));
        m += &format!("command = {}\n", self.command);
        m += "\n[config]\n";
        for (k, v) in &self.config {
            m += &format!("{k} = {v}\n");
        }
        if !self.seeds.is_empty() {
            m += "\n[seeds]\n";
            for (k, v) in &self.seeds {
                m += &format!("{k} = {v}\n");
            }
        }
        if !self.notes.is_empty() {
            m += "\n[run]\n";
            for (k, v) in &self.notes {
                m += &format!("{k} = {v}\n");
            }
        }
        // Same layout as `sha256sum`, so `sha256sum -c` can check the files.
        m += "\n[artifacts]\n";
        for (name, bytes) in &self.files {
            m += &format!("{}  {name}\n", hex::encode(Sha256::digest(bytes)));
        }
        m
    }

    /// Writes the artifacts, then the manifest.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        let io = |what: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", what.display()));
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| io(&path, e))?;
        f.write_all(self.manifest().as_bytes()).map_err(|e| io(&path, e))
    }
}

pub fn run(command: Command, cfg: &mut Config) -> Result<Outcome, CliError> {
    let mut out = Outcome {
        command: command.name().to_string(),
        ..Outcome::default()
    };
    match command {
        Command::SolvePde => solve_pde(cfg, &mut out, false)?,
        Command::Momenta => solve_pde(cfg, &mut out, true)?,
        Command::SimulateParticles => simulate_particles(cfg, &mut out)?,
        Command::Compare => compare(cfg, &mut out)?,
        Command::GlmDemo => glm_demo(cfg, &mut out)?,
        Command::LemmaTests => lemma_tests(cfg, &mut out)?,
    }
    out.config = cfg.manifest_entries();
    Ok(out)
}

// Seeds derived from the single `seed` setting.
fn dataset_seed(seed: u64) -> u64 {
    seed
}

fn particle_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn bartlett_seed(seed: u64) -> u64 {
    seed.wrapping_add(2)
}

struct GlmKeys {
    n: usize,
    beta_star: DVector<f64>,
    law: CovariateLaw,
    seed: u64,
}

fn glm_keys(cfg: &mut Config) -> Result<GlmKeys, CliError> {
    let n = cfg.count("glm_n", None)?;
    let beta_star = DVector::from_vec(cfg.reals("beta_star")?);
    let law = cfg
        .text("covariate_law", Some("standard_normal"))?
        .parse()
        .map_err(|e: newtonflow::Error| CliError::config(e.to_string()))?;
    let seed = cfg.seed("seed", 0)?;
    Ok(GlmKeys {
        n,
        beta_star,
        law,
        seed,
    })
}

fn simulate(g: &GlmKeys, out: &mut Outcome) -> Result<GlmDataset, CliError> {
    out.seeds.push(("dataset".into(), dataset_seed(g.seed)));
    Ok(glm_simulate(g.n, &g.beta_star, dataset_seed(g.seed), g.law)?)
}

struct FieldKeys {
    key: String,
    glm: Option<GlmKeys>,
}

fn field_keys(cfg: &mut Config) -> Result<FieldKeys, CliError> {
    let key = cfg.text("field", None)?;
    if !KEYS.contains(&key.as_str()) {
        return Err(CliError::config(format!(
            "unknown field '{key}' (known: {})",
            KEYS.join(", ")
        )));
    }
    let glm = if needs_dataset(&key) { Some(glm_keys(cfg)?) } else { None };
    Ok(FieldKeys { key, glm })
}

fn build_field(fk: &FieldKeys, p: usize, out: &mut Outcome) -> Result<VelocityField, CliError> {
    let dataset = match &fk.glm {
        Some(g) => Some(Arc::new(simulate(g, out)?)),
        None => None,
    };
    Ok(builtin_field(&fk.key, p, dataset)?)
}

fn grid_keys(cfg: &mut Config) -> Result<GridSpec, CliError> {
    let lower = cfg.reals("grid_lower")?;
    let p = lower.len();
    let dx = cfg.reals_p("grid_dx", p)?;
    let cells = cfg.counts_p("grid_cells", p)?;
    Ok(GridSpec::new(lower, dx, cells)?)
}

struct TimeKeys {
    dt: f64,
    t_end: f64,
    snapshots: Vec<f64>,
}

fn time_keys(cfg: &mut Config) -> Result<TimeKeys, CliError> {
    let dt = cfg.positive("dt", None)?;
    let t_end = cfg.real("t_end", None)?;
    if t_end < 0.0 {
        return Err(CliError::config(format!("'t_end' must be nonnegative, got {t_end:?}")));
    }
    let snapshots = cfg.reals("snapshots")?;
    if snapshots.iter().any(|t| *t < 0.0 || *t > t_end) {
        return Err(CliError::config("'snapshots' must lie in [0, t_end]"));
    }
    if snapshots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::config("'snapshots' must be strictly increasing"));
    }
    Ok(TimeKeys { dt, t_end, snapshots })
}

fn policy_keys(cfg: &mut Config) -> Result<SubstepPolicy, CliError> {
    match cfg.text("substeps", Some("refuse"))?.as_str() {
        "subcycle" => {
            let cfl = cfg.positive("cfl", Some(0.9))?;
            if cfl > 1.0 {
                return Err(CliError::config(format!("'cfl' must be at most 1, got {cfl:?}")));
            }
            Ok(SubstepPolicy::Subcycle { cfl })
        }
        _ => Ok(SubstepPolicy::Refuse),
    }
}

fn init_keys(cfg: &mut Config, p: usize) -> Result<(DVector<f64>, DMatrix<f64>), CliError> {
    let mean = DVector::from_vec(cfg.reals_p("init_mean", p)?);
    let sd = DVector::from_vec(cfg.reals_p("init_sd", p)?);
    if sd.iter().any(|s| *s <= 0.0) {
        return Err(CliError::config("'init_sd' entries must be positive"));
    }
    Ok((mean, DMatrix::from_diagonal(&sd.map(|s| s * s))))
}

fn method_key(cfg: &mut Config) -> Result<Method, CliError> {
    cfg.text("method", Some("rk4"))?
        .parse()
        .map_err(|e: newtonflow::Error| CliError::config(e.to_string()))
}

fn note_transport(out: &mut Outcome, run: &TransportRun) {
    out.note("substeps_per_step", run.substeps);
    out.note("requested_courant", fmt_num(run.requested_courant));
    for s in &run.snapped {
        out.note(
            "snapped_snapshot",
            format!("{} -> {}", fmt_num(s.requested), fmt_num(s.actual)),
        );
    }
}

fn solve_pde(cfg: &mut Config, out: &mut Outcome, momenta_only: bool) -> Result<(), CliError> {
    let fk = field_keys(cfg)?;
    let grid = grid_keys(cfg)?;
    let p = grid.dim();
    let tk = time_keys(cfg)?;
    let policy = policy_keys(cfg)?;
    let (mean, cov) = init_keys(cfg, p)?;

    let field = build_field(&fk, p, out)?;
    let rho0 = gaussian_density(&grid, &mean, &cov)?;
    let run = solve_transport(&rho0, &field, tk.dt, tk.t_end, &tk.snapshots, policy)?;
    note_transport(out, &run);

    if momenta_only {
        let e0 = run.reports.first().map_or(0.0, |r| r.momenta);
        let non_increasing = run
            .reports
            .windows(2)
            .all(|w| w[1].momenta <= w[0].momenta + 1e-3 * e0);
        out.note("momenta_non_increasing", non_increasing);
        return out.file("momenta.csv", |w| {
            writeln!(w, "t,momenta,mass")?;
            for r in &run.reports {
                writeln!(w, "{},{},{}", fmt_num(r.time), fmt_num(r.momenta), fmt_num(r.mass))?;
            }
            Ok(())
        });
    }

    for (k, (rho, report)) in run.snapshots.iter().zip(&run.reports).enumerate() {
        out.file(format!("density_{k}.txt"), |w| write_density(w, rho))?;
        // Sections cut through the cell nearest the density mean.
        let fixed = indices_at(&grid, &report.mean);
        for a in 0..p {
            for b in a + 1..p {
                out.file(format!("section_{k}_x{}x{}.csv", a + 1, b + 1), |w| {
                    write_section(w, rho, (a, b), &fixed)
                })?;
            }
        }
    }
    out.file("moments.csv", |w| write_moments(w, &run.reports, &run.outflow))
}

fn simulate_particles(cfg: &mut Config, out: &mut Outcome) -> Result<(), CliError> {
    let fk = field_keys(cfg)?;
    let grid = grid_keys(cfg)?;
    let p = grid.dim();
    let tk = time_keys(cfg)?;
    let (mean, cov) = init_keys(cfg, p)?;
    let n = cfg.count("particles", None)?;
    let method = method_key(cfg)?;
    let seed = cfg.seed("seed", 0)?;

    let field = build_field(&fk, p, out)?.with_domain(grid.domain());
    out.seeds.push(("particles".into(), particle_seed(seed)));
    let mut e = sample_initial(&grid.domain(), &InitLaw::Gaussian { mean, cov }, n, particle_seed(seed))?;
    let mut done = 0usize;
    let mut escaped = 0usize;
    let mut summary = Vec::new();
    for (k, t) in tk.snapshots.iter().enumerate() {
        let target = step_count(tk.dt, *t)?;
        if target > done {
            let adv = advance_ensemble(&e, &field, tk.dt, (target - done) as f64 * tk.dt, method)?;
            e = adv.ensemble;
            escaped += adv.escaped;
            done = target;
        }
        summary.push((e.time, e.len(), escaped));
        out.file(format!("particles_{k}.csv"), |w| write_ensemble(w, &e, p))?;
    }
    out.file("particles_summary.csv", |w| {
        writeln!(w, "t,inside,escaped")?;
        for (t, inside, esc) in &summary {
            writeln!(w, "{},{inside},{esc}", fmt_num(*t))?;
        }
        Ok(())
    })
}

fn compare(cfg: &mut Config, out: &mut Outcome) -> Result<(), CliError> {
    let fk = field_keys(cfg)?;
    let grid = grid_keys(cfg)?;
    let p = grid.dim();
    let tk = time_keys(cfg)?;
    let policy = policy_keys(cfg)?;
    let (init_mean, init_cov) = init_keys(cfg, p)?;
    let n_particles = cfg.count("particles", None)?;
    let method = method_key(cfg)?;
    let seed = cfg.seed("seed", 0)?;
    let smoothing = match cfg.text("smoothing", Some("histogram"))?.as_str() {
        "kernel" => {
            let min_dx = grid.dx().iter().cloned().fold(f64::INFINITY, f64::min);
            Smoothing::GaussianKernel {
                bandwidth: cfg.positive("bandwidth", Some(min_dx))?,
            }
        }
        _ => Smoothing::Histogram,
    };

    let field = build_field(&fk, p, out)?;
    out.seeds.push(("particles".into(), particle_seed(seed)));
    let spec = ExperimentSpec {
        field,
        init_mean,
        init_cov,
        n_particles,
        grid,
        dt: tk.dt,
        t_end: tk.t_end,
        snapshot_times: tk.snapshots,
        seed: particle_seed(seed),
        method,
        smoothing,
        policy,
    };
    let rows = equivalence_experiment(&spec)?;
    out.file("comparison.csv", |w| write_comparisons(w, &rows))
}

fn glm_demo(cfg: &mut Config, out: &mut Outcome) -> Result<(), CliError> {
    let g = glm_keys(cfg)?;
    let tol = cfg.positive("mle_tol", Some(1e-10))?;
    let max_iter = cfg.count("mle_max_iter", Some(100))?;
    let replications = cfg.count("bartlett_replications", Some(0))?;

    let d = simulate(&g, out)?;
    let p = d.p();
    let mle = fisher_scoring_solve(&d, &DVector::zeros(p), tol, max_iter)?;
    out.file("dataset.csv", |w| write_dataset(w, &d))?;
    out.file("dataset.meta", |w| write_dataset_meta(w, &d))?;
    out.file("mle.csv", |w| {
        let cols: Vec<String> = (1..=p).map(|i| format!("beta_hat_{i}")).collect();
        writeln!(w, "iterations,final_score_norm,{}", cols.join(","))?;
        let vals: Vec<String> = mle.beta_hat.iter().map(|x| fmt_num(*x)).collect();
        writeln!(w, "{},{},{}", mle.iterations, fmt_num(mle.final_score_norm), vals.join(","))
    })?;
    if replications == 0 {
        return Ok(());
    }
    out.seeds.push(("bartlett".into(), bartlett_seed(g.seed)));
    let b = bartlett_check(&g.beta_star, g.n, replications, bartlett_seed(g.seed), g.law)?;
    out.file("bartlett.csv", |w| {
        writeln!(w, "quantity,i,j,mean,std_error")?;
        let se = b.std_errors.as_ref();
        let blank = |v: Option<f64>| v.map_or(String::new(), fmt_num);
        for i in 0..p {
            let s = se.map(|s| s.score[i]);
            writeln!(w, "score,{},,{},{}", i + 1, fmt_num(b.mean_score[i]), blank(s))?;
        }
        for i in 0..p {
            for j in 0..p {
                let diff = b.mean_neg_hessian[(i, j)] - b.fisher[(i, j)];
                let s = se.map(|s| s.hessian_vs_fisher[(i, j)]);
                writeln!(w, "neg_hessian_minus_fisher,{},{},{},{}", i + 1, j + 1, fmt_num(diff), blank(s))?;
            }
        }
        for i in 0..p {
            for j in 0..p {
                let diff = b.mean_neg_hessian[(i, j)] - b.score_outer[(i, j)];
                let s = se.map(|s| s.hessian_vs_outer[(i, j)]);
                writeln!(w, "neg_hessian_minus_score_outer,{},{},{},{}", i + 1, j + 1, fmt_num(diff), blank(s))?;
            }
        }
        Ok(())
    })
}

fn lemma_tests(cfg: &mut Config, out: &mut Outcome) -> Result<(), CliError> {
    let fk = field_keys(cfg)?;
    let center = DVector::from_vec(cfg.reals("center")?);
    let sigma = cfg.positive("sigma", None)?;
    let dt = cfg.positive("dt", None)?;
    let dx = cfg.positive("lemma_dx", None)?;
    let halvings = cfg.count("lemma_halvings", Some(2))?;

    let field = build_field(&fk, center.len(), out)?;
    let h = lemma_halving(&field, &center, sigma, dt, dx, halvings)?;
    out.file("lemma.csv", |w| {
        writeln!(
            w,
            "level,sigma,dt,dx,drift_residual,drift_ratio,delta_cov_norm,normalized,nonlinear_normalized,variance_ratio"
        )?;
        let ratio = |v: &[f64], k: usize| if k == 0 { String::new() } else { fmt_num(v[k - 1]) };
        for (k, l) in h.levels.iter().enumerate() {
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{},{},{}",
                fmt_num(l.drift.sigma),
                fmt_num(l.drift.dt),
                fmt_num(l.dx),
                fmt_num(l.drift.residual),
                ratio(&h.drift_ratios, k),
                fmt_num(l.variance.delta_cov_norm),
                fmt_num(l.variance.normalized),
                fmt_num(l.variance.nonlinear_normalized),
                ratio(&h.variance_ratios, k),
            )?;
        }
        Ok(())
    })
}
