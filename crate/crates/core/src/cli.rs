//! Command-line front end. Every subcommand writes deterministic files into
//! `--out` and re-verifies what it emits before reporting success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::export::{fmt_f64, numbered, read_trajectory, write_json, CsvTable, ExportError};
use crate::fiber::{Fiber, FiberError, FiberTrace, Segment};
use crate::inverse::{
    extremal_section, lift_trajectory, Allocator, Branch, InverseError, LiftedTrajectory,
    SectionInverseConfig, SectionOutcome,
};
use crate::model::{
    transform, AllocationModel, KineticState, LoadError, ModelError, Task, Tolerances,
};
use crate::potential::{
    locate_segment, potential, solve_on_segment, PotentialError, SolverOptions,
};
use crate::strata::{
    reciprocal_hinge_count, reciprocal_hinge_count_pairs, OrthantSignature, StrataError,
};

/// Largest relative residual accepted for any emitted row.
pub const CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strata(#[from] StrataError),
    #[error(transparent)]
    Solver(#[from] InverseError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("self-consistency check failed: {0}")]
    Consistency(String),
}

impl From<PotentialError> for CliError {
    fn from(e: PotentialError) -> Self {
        CliError::Solver(e.into())
    }
}

impl From<FiberError> for CliError {
    fn from(e: FiberError) -> Self {
        match e {
            FiberError::Model(m) => CliError::Model(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl CliError {
    /// 1 for invalid input, 2 for solver failures, 3 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Model(_) | CliError::Strata(_) => 1,
            CliError::Load(LoadError::Io { .. }) => 3,
            CliError::Load(_) => 1,
            CliError::Solver(InverseError::Model(_)) => 1,
            CliError::Solver(_) | CliError::Consistency(_) => 2,
            CliError::Export(ExportError::Format { .. }) => 1,
            CliError::Export(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "signquad",
    version,
    about = "Fibers, potential leaves, orthant strata and smooth right-inverses of w = A (v ⊙ |v|)"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model file of the form {"A": [[...], ...]} with n = m + 1 columns
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for randomized sampling; recorded in every output header
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative singular-value threshold for full row rank
    #[arg(long)]
    pub rank_rel: Option<f64>,
    /// Relative threshold below which a null-space entry counts as zero
    #[arg(long)]
    pub redundancy_rel: Option<f64>,
    /// Absolute threshold below which a kinetic coordinate counts as halted
    #[arg(long)]
    pub zero: Option<f64>,
    /// Relative cancellation band that marks a transformed coordinate as crossing
    #[arg(long)]
    pub crossing_rel: Option<f64>,
    /// Largest |λ| explored when solving on unbounded fiber segments
    #[arg(long, default_value_t = 1e12)]
    pub lambda_cap: f64,
}

impl Common {
    fn tolerances(&self) -> Tolerances {
        let d = Tolerances::default();
        Tolerances {
            rank_rel: self.rank_rel.unwrap_or(d.rank_rel),
            redundancy_rel: self.redundancy_rel.unwrap_or(d.redundancy_rel),
            zero: self.zero.unwrap_or(d.zero),
            crossing_rel: self.crossing_rel.unwrap_or(d.crossing_rel),
        }
    }

    fn solver(&self) -> Result<SolverOptions, CliError> {
        let opts = SolverOptions {
            lambda_cap: self.lambda_cap,
            ..SolverOptions::default()
        };
        opts.validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(opts)
    }

    fn load(&self) -> Result<AllocationModel, CliError> {
        let tol = self.tolerances();
        tol.validate()?;
        Ok(AllocationModel::load(&self.model, tol)?)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|source| ExportError::Io {
            path: self.out.clone(),
            source,
        })?;
        Ok(&self.out)
    }

    fn header(&self, command: &str) -> String {
        format!(
            "signquad {command} seed={} model={}",
            self.seed,
            self.model.display()
        )
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchArg {
    Positive,
    Negative,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Positive => Branch::Positive,
            BranchArg::Negative => Branch::Negative,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocatorArg {
    Extremal,
    Section,
    Naive,
}

/// A comma-separated vector argument such as `1,-0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorArg(pub Vec<f64>);

fn parse_vector(text: &str) -> Result<VectorArg, String> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("{s:?} is not a finite number"))
        })
        .collect::<Result<_, _>>()
        .map(VectorArg)
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a model and print its rank, null-space generator and central direction
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Sample fibers as polylines (fiber_K.csv, central.csv, fibers.json)
    Fibers {
        #[command(flatten)]
        common: Common,
        /// Task vector, comma separated; repeat for several fibers
        #[arg(long = "w", value_parser = parse_vector, allow_hyphen_values = true)]
        tasks: Vec<VectorArg>,
        /// Number of seeded random tasks used when no --w is given
        #[arg(long, default_value_t = 4)]
        random_tasks: usize,
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        lambda_min: f64,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        lambda_max: f64,
        #[arg(long, default_value_t = 401)]
        samples: usize,
    },
    /// Sample level sets Φ = C inside one orthant or layer (leaf_K.csv, foliation.json)
    #[command(group(ArgGroup::new("target").required(true).args(["orthant", "layer"])))]
    Foliation {
        #[command(flatten)]
        common: Common,
        /// Orthant as a sign string such as "+-+"
        #[arg(long, allow_hyphen_values = true)]
        orthant: Option<String>,
        /// Layer index l (number of entry coordinates)
        #[arg(long)]
        layer: Option<usize>,
        /// Potential levels, comma separated
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        levels: Vec<f64>,
        /// Number of seeded random task directions (m ≥ 2; m = 1 uses ±1)
        #[arg(long, default_value_t = 64)]
        directions: usize,
        /// Number of log-spaced task magnitudes per direction
        #[arg(long, default_value_t = 25)]
        radii: usize,
        #[arg(long, default_value_t = 1e-2)]
        radius_min: f64,
        #[arg(long, default_value_t = 1e2)]
        radius_max: f64,
    },
    /// Enumerate layers, boundary strata and reciprocal hinges (strata.json, strata.csv, layer_L.dot)
    Strata {
        #[command(flatten)]
        common: Common,
        /// Restrict to one layer
        #[arg(long)]
        layer: Option<usize>,
        /// Deepest codimension of boundary strata listed in strata.csv
        #[arg(long, default_value_t = 2)]
        max_codim: usize,
    },
    /// Invert one task on a leaf (invert.json)
    Invert {
        #[command(flatten)]
        common: Common,
        /// Task vector, comma separated
        #[arg(long = "w", value_parser = parse_vector, allow_hyphen_values = true)]
        task: VectorArg,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        level: f64,
        #[arg(long, value_enum, default_value = "positive")]
        branch: BranchArg,
        /// Solve in this layer instead of the extremal orthant of --branch
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 1e-6)]
        hinge_margin: f64,
    },
    /// Lift a task trajectory CSV (t, w_1..w_m) to kinetic space (lift.csv, lift.json)
    Lift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, value_enum, default_value = "extremal")]
        allocator: AllocatorArg,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        level: f64,
        #[arg(long, value_enum, default_value = "positive")]
        branch: BranchArg,
        /// Layer for the section allocator
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 1e-6)]
        hinge_margin: f64,
    },
}

/// Runs a parsed command and returns the text meant for stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Validate { common } => validate(&common),
        Command::Fibers {
            common,
            tasks,
            random_tasks,
            lambda_min,
            lambda_max,
            samples,
        } => fibers(
            &common,
            tasks,
            random_tasks,
            lambda_min,
            lambda_max,
            samples,
        ),
        Command::Foliation {
            common,
            orthant,
            layer,
            levels,
            directions,
            radii,
            radius_min,
            radius_max,
        } => foliation(
            &common,
            FoliationArgs {
                orthant,
                layer,
                levels,
                directions,
                radii,
                radius_min,
                radius_max,
            },
        ),
        Command::Strata {
            common,
            layer,
            max_codim,
        } => strata(&common, layer, max_codim),
        Command::Invert {
            common,
            task,
            level,
            branch,
            layer,
            hinge_margin,
        } => invert(&common, task.0, level, branch.into(), layer, hinge_margin),
        Command::Lift {
            common,
            trajectory,
            allocator,
            level,
            branch,
            layer,
            hinge_margin,
        } => lift(
            &common,
            &trajectory,
            allocator,
            level,
            branch.into(),
            layer,
            hinge_margin,
        ),
    }
}

fn short(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.5}")).collect();
    format!("[{}]", parts.join(", "))
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

/// Sign string of a state, `0` marking exact zeros.
pub fn sign_label(v: &DVector<f64>) -> String {
    v.iter()
        .map(|x| match x.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => '+',
            Some(std::cmp::Ordering::Less) => '-',
            _ => '0',
        })
        .collect()
}

/// `‖A x(v) − w‖∞` relative to the largest row of summed magnitudes.
pub fn task_residual(model: &AllocationModel, v: &KineticState, w: &Task) -> f64 {
    let x = transform(v);
    let a = model.matrix();
    let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
    for r in 0..a.nrows() {
        let (mut sum, mut size) = (-w[r], w[r].abs());
        for c in 0..a.ncols() {
            sum += a[(r, c)] * x[c];
            size += (a[(r, c)] * x[c]).abs();
        }
        err = err.max(sum.abs());
        scale = scale.max(size);
    }
    if scale > 0.0 {
        err / scale
    } else {
        0.0
    }
}

/// `|Φ(v) − C|` relative to `max(1, Σ |b_i ln|v_i||)`; infinite off the open orthants.
pub fn potential_residual(model: &AllocationModel, v: &KineticState, level: f64) -> f64 {
    let Some(phi) = potential(model, v).ok().and_then(|p| p.finite()) else {
        return f64::INFINITY;
    };
    let b = model.null_vector();
    let scale = b
        .iter()
        .zip(v.iter())
        .map(|(bi, vi)| (bi * vi.abs().ln()).abs())
        .sum::<f64>()
        .max(1.0);
    (phi - level).abs() / scale
}

fn validate(common: &Common) -> Result<String, CliError> {
    let model = common.load()?;
    let s = model.singular_values();
    let b = model.null_vector();
    let min_b = b.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", common.model.display());
    let _ = writeln!(out, "shape: {} x {}", model.task_dim(), model.kinetic_dim());
    let _ = writeln!(out, "singular values: {}", short(s));
    let _ = writeln!(
        out,
        "rank: {} (sigma_min / sigma_max = {:.3e})",
        model.task_dim(),
        s[s.len() - 1] / s[0]
    );
    let _ = writeln!(out, "b = {}", short(b));
    let _ = writeln!(out, "c = {}", short(model.central_direction()));
    let _ = writeln!(
        out,
        "sign(b) = {}",
        model.sign_pattern().extremal_positive()
    );
    let _ = writeln!(out, "full row rank: ok");
    let _ = writeln!(out, "strict redundancy: ok (min |b_i| = {min_b:.5})");
    Ok(out)
}

fn random_unit(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.05 && n <= 1.0 {
            return v / n;
        }
    }
}

fn fiber_rows(
    fiber: &Fiber<'_>,
    trace: &FiberTrace,
    lambdas: &[f64],
    header: String,
) -> (CsvTable, Vec<KineticState>) {
    let model = fiber.model();
    let n = model.kinetic_dim();
    let mut cols = vec!["lambda".to_string()];
    cols.extend(numbered("v", n));
    cols.push("marker".into());
    let mut table = CsvTable::new(header, cols);
    let (lo, hi) = (lambdas[0], lambdas[lambdas.len() - 1]);
    let mut rows: Vec<(f64, String)> = lambdas.iter().map(|&l| (l, String::new())).collect();
    rows.extend(
        trace
            .crossings
            .iter()
            .filter(|c| c.lambda >= lo && c.lambda <= hi)
            .map(|c| (c.lambda, format!("crossing_{}", c.index + 1))),
    );
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut states = Vec::with_capacity(rows.len());
    for (lambda, marker) in rows {
        let v = fiber.state(lambda);
        let mut row = vec![fmt_f64(lambda)];
        row.extend(v.iter().map(|x| fmt_f64(*x)));
        row.push(marker);
        table.push(row);
        states.push(v);
    }
    (table, states)
}

fn trace_json(trace: &FiberTrace) -> Value {
    json!({
        "w": trace.w.iter().copied().collect::<Vec<f64>>(),
        "generic": trace.generic,
        "skipped_orthants": trace.skipped,
        "crossings": trace.crossings.iter().map(|c| json!({"lambda": c.lambda, "index": c.index + 1})).collect::<Vec<_>>(),
        "orthants": trace.orthant_sequence().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    })
}

fn fibers(
    common: &Common,
    tasks: Vec<VectorArg>,
    random_tasks: usize,
    lambda_min: f64,
    lambda_max: f64,
    samples: usize,
) -> Result<String, CliError> {
    if !(lambda_min.is_finite() && lambda_max.is_finite() && lambda_min < lambda_max) || samples < 2
    {
        return Err(CliError::Usage(
            "need finite --lambda-min < --lambda-max and --samples >= 2".into(),
        ));
    }
    let model = common.load()?;
    let out = common.out_dir()?;
    let m = model.task_dim();
    let n = model.kinetic_dim();
    let tasks: Vec<Task> = if tasks.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
        (0..random_tasks)
            .map(|_| Task::new(DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0))))
            .collect::<Result<_, _>>()?
    } else {
        tasks
            .iter()
            .map(|t| Task::from_slice(&t.0))
            .collect::<Result<_, _>>()?
    };
    for t in &tasks {
        model.check_task(t)?;
    }
    let lambdas: Vec<f64> = (0..samples)
        .map(|k| lambda_min + (lambda_max - lambda_min) * k as f64 / (samples - 1) as f64)
        .collect();

    let mut passed = true;
    let mut reports = Vec::new();
    for (k, w) in tasks.iter().enumerate() {
        let fiber = Fiber::new(&model, w.clone())?;
        let trace = fiber.trace();
        let file = format!("fiber_{k}.csv");
        let (table, states) = fiber_rows(&fiber, &trace, &lambdas, common.header("fibers"));
        table.write(&out.join(&file))?;
        let max_residual = states
            .iter()
            .map(|v| task_residual(&model, v, w))
            .fold(0.0, f64::max);
        let count_ok = !trace.generic || trace.crossings.len() == n;
        passed &= max_residual <= CONSISTENCY_TOL && count_ok;
        let mut r = trace_json(&trace);
        r["file"] = json!(file);
        r["rows"] = json!(states.len());
        r["max_task_residual"] = json!(max_residual);
        reports.push(r);
    }

    let zero = Task::zeros(m);
    let central = Fiber::new(&model, zero.clone())?;
    let central_trace = central.trace();
    let (table, states) = fiber_rows(&central, &central_trace, &lambdas, common.header("fibers"));
    table.write(&out.join("central.csv"))?;
    let c_hat = model.central_direction() / model.central_direction().norm();
    let mut collinearity: f64 = 0.0;
    let mut central_residual: f64 = 0.0;
    for v in &states {
        let norm = v.norm();
        if norm > 0.0 {
            let off = v.as_vector() - &c_hat * v.dot(&c_hat);
            collinearity = collinearity.max(off.norm() / norm);
        }
        central_residual = central_residual.max(task_residual(&model, v, &zero));
    }
    passed &= collinearity <= 1e-9 && central_residual <= CONSISTENCY_TOL;

    let report = json!({
        "command": "fibers",
        "seed": common.seed,
        "model": common.model.display().to_string(),
        "tolerance": CONSISTENCY_TOL,
        "fibers": reports,
        "central": {
            "file": "central.csv",
            "rows": states.len(),
            "max_collinearity": collinearity,
            "max_task_residual": central_residual,
        },
        "passed": passed,
    });
    write_json(&out.join("fibers.json"), &report)?;
    if !passed {
        return Err(CliError::Consistency(format!(
            "fiber rows exceed tolerance, see {}",
            out.join("fibers.json").display()
        )));
    }
    Ok(format!(
        "wrote {} fibers and the central fiber to {}\n",
        tasks.len(),
        out.display()
    ))
}

struct FoliationArgs {
    orthant: Option<String>,
    layer: Option<usize>,
    levels: Vec<f64>,
    directions: usize,
    radii: usize,
    radius_min: f64,
    radius_max: f64,
}

enum Target {
    Orthant(OrthantSignature),
    Layer(usize),
}

impl Target {
    fn pick<'t>(&self, trace: &'t FiberTrace) -> Option<&'t Segment> {
        match self {
            Target::Orthant(s) => trace.segments.iter().find(|seg| seg.orthant == *s),
            Target::Layer(l) => locate_segment(trace, *l).ok(),
        }
    }

    fn includes_origin(&self, n: usize) -> bool {
        match self {
            Target::Orthant(s) => s.is_extremal(),
            Target::Layer(l) => *l == 0 || *l == n,
        }
    }
}

fn foliation(common: &Common, args: FoliationArgs) -> Result<String, CliError> {
    let FoliationArgs {
        orthant,
        layer,
        levels,
        directions,
        radii,
        radius_min,
        radius_max,
    } = args;
    if !(radius_min > 0.0 && radius_max >= radius_min && radius_max.is_finite()) || radii == 0 {
        return Err(CliError::Usage(
            "need 0 < --radius-min <= --radius-max and --radii >= 1".into(),
        ));
    }
    if let Some(bad) = levels.iter().find(|c| !c.is_finite()) {
        return Err(CliError::Usage(format!("level {bad} is not finite")));
    }
    let model = common.load()?;
    let solver = common.solver()?;
    let out = common.out_dir()?;
    let m = model.task_dim();
    let n = model.kinetic_dim();
    let pattern = model.sign_pattern();
    let target = match (orthant, layer) {
        (Some(s), _) => Target::Orthant(pattern.parse(&s)?),
        (None, Some(l)) if l <= n => Target::Layer(l),
        (None, Some(l)) => return Err(StrataError::LayerOutOfRange { layer: l, n }.into()),
        (None, None) => unreachable!("clap enforces the target group"),
    };
    let target_label = match &target {
        Target::Orthant(s) => s.to_string(),
        Target::Layer(l) => format!("layer {l}"),
    };

    let dirs: Vec<DVector<f64>> = if m == 1 {
        vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
        ]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
        (0..directions).map(|_| random_unit(&mut rng, m)).collect()
    };
    let mags: Vec<f64> = (0..radii)
        .map(|k| {
            if radii == 1 {
                radius_min
            } else {
                radius_min * (radius_max / radius_min).powf(k as f64 / (radii - 1) as f64)
            }
        })
        .collect();
    let mut tasks: Vec<Task> = Vec::new();
    if target.includes_origin(n) {
        tasks.push(Task::zeros(m));
    }
    for d in &dirs {
        for r in &mags {
            tasks.push(Task::new(d * *r)?);
        }
    }
    let fibers: Vec<(Fiber<'_>, FiberTrace)> = tasks
        .iter()
        .map(|w| {
            let f = Fiber::new(&model, w.clone())?;
            let t = f.trace();
            Ok((f, t))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut cols = vec!["level".to_string()];
    cols.extend(numbered("w", m));
    cols.push("lambda".into());
    cols.extend(numbered("v", n));
    cols.push("phi".into());

    let mut passed = true;
    let mut reports = Vec::new();
    let mut total = 0;
    for (k, &level) in levels.iter().enumerate() {
        let file = format!("leaf_{k}.csv");
        let mut table = CsvTable::new(common.header("foliation"), cols.clone());
        let (mut unresolved, mut not_visited, mut below_zero) = (0usize, 0usize, 0usize);
        let (mut max_phi, mut max_task, mut max_norm): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for (fiber, trace) in &fibers {
            let Some(seg) = target.pick(trace) else {
                not_visited += 1;
                continue;
            };
            let point = match solve_on_segment(fiber, seg, level, &solver) {
                Ok(p) => p,
                Err(PotentialError::Unresolvable { .. } | PotentialError::NoBracket { .. }) => {
                    unresolved += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            // Representable but inside the halted band of the model.
            if !point.v.is_regular(model.tolerances().zero) {
                below_zero += 1;
                continue;
            }
            let phi = potential(&model, &point.v)?.finite().unwrap_or(f64::NAN);
            max_phi = max_phi.max(potential_residual(&model, &point.v, level));
            max_task = max_task.max(task_residual(&model, &point.v, fiber.task()));
            max_norm = max_norm.max(point.v.norm());
            let mut row = vec![fmt_f64(level)];
            row.extend(fiber.task().iter().map(|x| fmt_f64(*x)));
            row.push(fmt_f64(point.lambda));
            row.extend(point.v.iter().map(|x| fmt_f64(*x)));
            row.push(fmt_f64(phi));
            table.push(row);
        }
        table.write(&out.join(&file))?;
        let points = table.rows.len();
        total += points;
        passed &= max_phi <= CONSISTENCY_TOL && max_task <= CONSISTENCY_TOL;
        reports.push(json!({
            "level": level,
            "file": file,
            "points": points,
            "unresolved": unresolved,
            "not_visited": not_visited,
            "below_zero_threshold": below_zero,
            "max_potential_residual": max_phi,
            "max_task_residual": max_task,
            "max_norm": max_norm,
        }));
    }

    let report = json!({
        "command": "foliation",
        "seed": common.seed,
        "model": common.model.display().to_string(),
        "target": target_label,
        "tasks": tasks.len(),
        "tolerance": CONSISTENCY_TOL,
        "levels": reports,
        "passed": passed,
    });
    write_json(&out.join("foliation.json"), &report)?;
    if !passed {
        return Err(CliError::Consistency(format!(
            "leaf points exceed tolerance, see {}",
            out.join("foliation.json").display()
        )));
    }
    Ok(format!(
        "wrote {total} points on {} levels of {target_label} to {}\n",
        levels.len(),
        out.display()
    ))
}

fn strata(common: &Common, layer: Option<usize>, max_codim: usize) -> Result<String, CliError> {
    let model = common.load()?;
    let out = common.out_dir()?;
    let n = model.kinetic_dim();
    let pattern = model.sign_pattern();
    let layers: Vec<usize> = match layer {
        Some(l) if l > n => return Err(StrataError::LayerOutOfRange { layer: l, n }.into()),
        Some(l) => vec![l],
        None => (0..=n).collect(),
    };

    let mut csv = CsvTable::new(
        common.header("strata"),
        vec![
            "signature".into(),
            "layer".into(),
            "kind".into(),
            "indices".into(),
            "dimension".into(),
        ],
    );
    let join = |idx: &[usize]| {
        idx.iter()
            .map(|i| (i + 1).to_string())
            .collect::<Vec<_>>()
            .join(";")
    };
    let mut reports = Vec::new();
    let mut text = String::new();
    let mut total = 0u64;
    for &l in &layers {
        let orthants = pattern.enumerate_layer(l)?;
        total += orthants.len() as u64;
        for s in &orthants {
            for d in s.boundary_strata(max_codim) {
                csv.push(vec![
                    s.to_string(),
                    l.to_string(),
                    d.kind.as_str().into(),
                    join(&d.indices),
                    d.dimension.to_string(),
                ]);
            }
        }
        let hinges = pattern.reciprocal_hinges(l)?;
        for h in &hinges {
            csv.push(vec![
                format!("{}|{}", h.orthants[0], h.orthants[1]),
                l.to_string(),
                h.kind.as_str().into(),
                join(&h.indices),
                h.dimension.to_string(),
            ]);
        }
        let graph = pattern.layer_adjacency_graph(l)?;
        let dot = format!("layer_{l}.dot");
        std::fs::write(out.join(&dot), graph.to_dot()).map_err(|source| ExportError::Io {
            path: out.join(&dot),
            source,
        })?;
        let _ = writeln!(
            text,
            "layer {l}: {} orthants, {} reciprocal hinges, {}",
            orthants.len(),
            hinges.len(),
            if graph.is_connected() {
                "connected"
            } else {
                "disconnected"
            }
        );
        reports.push(json!({
            "layer": l,
            "orthants": orthants.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "size": orthants.len(),
            "binomial": num_integer::binomial(n as u64, l as u64),
            "reciprocal_hinges": {
                "enumerated": hinges.len(),
                "half_product_formula": reciprocal_hinge_count(n, l),
                "pair_formula": reciprocal_hinge_count_pairs(n, l),
            },
            "graph": graph.to_json(),
            "dot": dot,
        }));
    }
    csv.write(&out.join("strata.csv"))?;
    let report = json!({
        "command": "strata",
        "seed": common.seed,
        "model": common.model.display().to_string(),
        "n": n,
        "sign_pattern": pattern.extremal_positive().to_string(),
        "layers": reports,
        "orthants_listed": total,
        "orthants_total": if layer.is_none() { Some(1u64 << n) } else { None },
    });
    write_json(&out.join("strata.json"), &report)?;
    Ok(text)
}

fn invert(
    common: &Common,
    task: Vec<f64>,
    level: f64,
    branch: Branch,
    layer: Option<usize>,
    hinge_margin: f64,
) -> Result<String, CliError> {
    let model = common.load()?;
    let solver = common.solver()?;
    let out = common.out_dir()?;
    let w = Task::from_slice(&task)?;
    model.check_task(&w)?;
    let (point, hinge) = match layer {
        None => (extremal_section(&model, &w, level, branch, &solver)?, None),
        Some(l) => {
            let config = SectionInverseConfig {
                solver,
                hinge_margin,
                ..SectionInverseConfig::new(l, level)
            };
            match crate::inverse::section_inverse(&model, &w, &config)? {
                SectionOutcome::Point { point, hinge } => (point, hinge),
                SectionOutcome::HingeContact { indices, lambda } => {
                    let report = json!({
                        "command": "invert",
                        "seed": common.seed,
                        "w": task,
                        "layer": l,
                        "level": level,
                        "hinge_contact": {
                            "indices": indices.iter().map(|i| i + 1).collect::<Vec<_>>(),
                            "lambda": lambda,
                        },
                    });
                    write_json(&out.join("invert.json"), &report)?;
                    return Ok(format!(
                        "{}\n",
                        serde_json::to_string_pretty(&report).expect("plain data")
                    ));
                }
            }
        }
    };
    let residual = task_residual(&model, &point.v, &w);
    let phi_residual = potential_residual(&model, &point.v, level);
    let report = json!({
        "command": "invert",
        "seed": common.seed,
        "w": task,
        "v": vec_json(point.v.as_vector()),
        "lambda": point.lambda,
        "level": level,
        "potential": point.potential,
        "orthant": point.orthant.to_string(),
        "layer": point.layer,
        "hinge": hinge.map(|h| json!({
            "indices": [h.indices[0] + 1, h.indices[1] + 1],
            "kind": h.kind.as_str(),
            "min_abs": h.min_abs,
            "ratio": h.ratio,
        })),
        "task_residual": residual,
        "potential_residual": phi_residual,
    });
    write_json(&out.join("invert.json"), &report)?;
    if residual > CONSISTENCY_TOL || phi_residual > CONSISTENCY_TOL {
        return Err(CliError::Consistency(format!(
            "inverse misses its tags (task {residual:e}, potential {phi_residual:e})"
        )));
    }
    Ok(format!(
        "{}\n",
        serde_json::to_string_pretty(&report).expect("plain data")
    ))
}

fn lift_table(model: &AllocationModel, lifted: &LiftedTrajectory, header: String) -> CsvTable {
    let mut cols = vec!["t".to_string()];
    cols.extend(numbered("v", model.kinetic_dim()));
    cols.extend(["speed".into(), "min_abs_v".into(), "signature".into()]);
    let mut table = CsvTable::new(header, cols);
    for s in &lifted.samples {
        let mut row = vec![fmt_f64(s.t)];
        row.extend(s.v.iter().map(|x| fmt_f64(*x)));
        row.push(fmt_f64(s.speed));
        row.push(fmt_f64(s.min_abs));
        row.push(sign_label(s.v.as_vector()));
        table.push(row);
    }
    table
}

#[allow(clippy::too_many_arguments)]
fn lift(
    common: &Common,
    trajectory: &Path,
    allocator: AllocatorArg,
    level: f64,
    branch: Branch,
    layer: Option<usize>,
    hinge_margin: f64,
) -> Result<String, CliError> {
    let model = common.load()?;
    let solver = common.solver()?;
    let samples = read_trajectory(trajectory, model.task_dim())?;
    let out = common.out_dir()?;
    let allocator = match allocator {
        AllocatorArg::Extremal => Allocator::Extremal { branch, level },
        AllocatorArg::Naive => Allocator::Naive,
        AllocatorArg::Section => {
            let l = layer.ok_or_else(|| {
                CliError::Usage("--layer is required for the section allocator".into())
            })?;
            Allocator::Section(SectionInverseConfig {
                solver,
                hinge_margin,
                ..SectionInverseConfig::new(l, level)
            })
        }
    };
    let lifted = match lift_trajectory(&model, &samples, &allocator) {
        Ok(l) => l,
        Err(e) => {
            let sample = match &e {
                InverseError::AtSample { index, .. }
                | InverseError::NonIncreasingTime { index } => Some(*index),
                _ => None,
            };
            let report = json!({
                "command": "lift",
                "seed": common.seed,
                "allocator": allocator.label(),
                "samples": samples.len(),
                "error": { "sample": sample, "message": e.to_string() },
            });
            write_json(&out.join("lift.json"), &report)?;
            return Err(e.into());
        }
    };
    lift_table(&model, &lifted, common.header("lift")).write(&out.join("lift.csv"))?;
    let max_residual = lifted
        .samples
        .iter()
        .map(|s| task_residual(&model, &s.v, &s.w))
        .fold(0.0, f64::max);
    let summary = lifted.summary();
    let hinge_events: Vec<Value> = lifted
        .samples
        .iter()
        .enumerate()
        .filter_map(|(k, s)| {
            s.hinge.as_ref().map(|h| {
                json!({"sample": k, "indices": [h.indices[0] + 1, h.indices[1] + 1], "kind": h.kind.as_str()})
            })
        })
        .collect();
    let passed = max_residual <= CONSISTENCY_TOL;
    let report = json!({
        "command": "lift",
        "seed": common.seed,
        "model": common.model.display().to_string(),
        "trajectory": trajectory.display().to_string(),
        "summary": summary,
        "hinge_events": hinge_events,
        "max_task_residual": max_residual,
        "passed": passed,
    });
    write_json(&out.join("lift.json"), &report)?;
    if !passed {
        return Err(CliError::Consistency(format!(
            "lifted states miss their tasks by {max_residual:e}"
        )));
    }
    Ok(format!(
        "{}: {} samples, max speed {:.6e}, {} signature changes\n",
        summary.allocator, summary.samples, summary.max_speed, summary.signature_changes
    ))
}
