//! Command-line front end: config parsing, dispatch and artifact output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::apps::{self, AbsAffinePhi, PhiKind, QuasilinearOp, QuasilinearSpec, SparseSpec};
use crate::error::{config, Error, Result};
use crate::ge::{self, GeProblem, Method, Rho, SolverConfig};
use crate::hilbert::{HilbertSpace, SpaceSpec};
use crate::operator::{
    check_firm_nonexpansive, AffineOp, DeclaredOp, DeclaredPhi, MonotoneConstants, PhiOp, ResolventOp,
    SingleValuedOp, DEFAULT_FD_STEPS,
};
use crate::oracle::{self, sample_pairs, PropertyReport, Region};
use crate::qvi::{self, QviProblem, SmallnessCase};
use crate::resolvent::{shrink, BoxNormalCone, LinearMonotoneB, WeightedShrinkage};
use crate::vector::{Param, Primal};

pub const CONFIG_VERSION: &str = "gesens/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_NONCONVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "gesens", version, about = "Solve parametric generalized equations and QVIs and their sensitivities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generalized equations 0 ∈ A(y,u) + B(y,u)
    #[command(subcommand)]
    Ge(GeCommand),
    /// Quasi-generalized equations 0 ∈ A(y,u) + B(y - Phi(y,u), u)
    #[command(subcommand)]
    Qvi(QviCommand),
    /// Built-in applications
    #[command(subcommand)]
    App(AppCommand),
    /// Property checks on the operators of a config
    Verify(VerifyArgs),
}

#[derive(Subcommand, Debug)]
enum GeCommand {
    Solve(SolveArgs),
    Sens(SensArgs),
}

#[derive(Subcommand, Debug)]
enum QviCommand {
    Solve(QviSolveArgs),
    Sens(QviSensArgs),
    Diag(QviDiagArgs),
}

#[derive(Subcommand, Debug)]
enum AppCommand {
    Sparse(SparseArgs),
    Quasilinear(QuasilinearArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Problem config (JSON, version "gesens/1")
    #[arg(long)]
    config: PathBuf,
    /// Parameter u as a JSON array or @file
    #[arg(long)]
    u: String,
    /// Step size: "auto", a number, or "auto*<scale>"
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    /// GE solver method
    #[arg(long, value_enum)]
    solver: Option<MethodArg>,
    /// Directory for output files
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SensArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter direction h as a JSON array or @file
    #[arg(long)]
    h: String,
    /// Difference-quotient steps for the oracle
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FD_STEPS.to_vec())]
    steps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    FixedPoint,
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Approach {
    Transfo,
    Iter,
    Both,
}

#[derive(Args, Debug)]
struct QviSolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "method", value_enum, default_value = "transfo")]
    approach: Approach,
    /// Anchor of the iteration approach (default zero)
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args, Debug)]
struct QviSensArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    h: String,
    #[arg(long = "method", value_enum, default_value = "both")]
    approach: Approach,
}

#[derive(Args, Debug)]
struct QviDiagArgs {
    #[command(flatten)]
    common: Common,
    /// Direction for the perturbation table (default all ones)
    #[arg(long)]
    h: Option<String>,
}

#[derive(Args, Debug)]
struct SparseArgs {
    /// Problem spec {weights, q, b} as JSON file; random from the seed otherwise
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long = "u-file")]
    u_file: Option<PathBuf>,
    #[arg(long = "h-file")]
    h_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QuasilinearArgs {
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Upper obstacle; omit for none
    #[arg(long)]
    obstacle: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    psi0: f64,
    #[arg(long, value_enum, default_value = "smoothed")]
    phi: PhiArg,
    #[arg(long = "u-file")]
    u_file: Option<PathBuf>,
    #[arg(long = "h-file")]
    h_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhiArg {
    Smoothed,
    Exact,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Suite {
    Cocoercive,
    Combined,
    Constants,
    Prox,
    Firm,
    Symmetry,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long)]
    u: Option<String>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// config schema

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub version: String,
    pub space: SpaceSpec,
    #[serde(rename = "A")]
    pub a: ASpec,
    #[serde(rename = "B")]
    pub b: BSpec,
    #[serde(rename = "Phi", default)]
    pub phi: Option<PhiSpec>,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub smallness_case: Option<CaseSpec>,
    #[serde(default)]
    pub potential: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Deserialize, Debug)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ASpec {
    Affine {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        param_matrix: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        offset: Option<Vec<f64>>,
        #[serde(default)]
        tanh_weight: f64,
    },
    Quasilinear {
        beta: f64,
    },
}

#[derive(Deserialize, Debug)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BSpec {
    /// `null` bounds are infinite.
    Box {
        lower: Vec<Option<f64>>,
        upper: Vec<Option<f64>>,
    },
    Shrink {},
    Linear {
        matrix: Vec<Vec<f64>>,
    },
}

#[derive(Deserialize, Debug)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Constant {
        value: Vec<f64>,
    },
    AbsAffine {
        alpha: f64,
        offset: Vec<f64>,
        #[serde(default)]
        tau: Option<f64>,
        #[serde(default)]
        param_matrix: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    pub mu: Option<f64>,
    pub lip: Option<f64>,
    pub lip_phi: Option<f64>,
}

#[derive(Deserialize, Debug, Clone, Copy)]
#[serde(rename_all = "lowercase")]
pub enum CaseSpec {
    A,
    B,
    Auto,
}

#[derive(Deserialize, Debug)]
#[serde(untagged)]
pub enum RhoSpec {
    Keyword(String),
    Value(f64),
    Scaled { auto_scale: f64 },
}

#[derive(Deserialize, Debug)]
#[serde(untagged)]
pub enum StartSpec {
    Keyword(String),
    Vector(Vec<f64>),
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub rho: Option<RhoSpec>,
    pub tol_residual: Option<f64>,
    pub max_iters: Option<usize>,
    pub y0: Option<StartSpec>,
    pub method: Option<String>,
    #[serde(default)]
    pub numeric_fallback: bool,
}

fn matrix(rows: &[Vec<f64>], nrows: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return config(format!("{what} must have {nrows} rows, got {}", rows.len()));
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return config(format!("{what} has rows of different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return config(format!("{what} has non-finite entries"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn parse_rho(s: &str) -> Result<Rho> {
    let s = s.trim();
    if s == "auto" {
        return Ok(Rho::Auto);
    }
    if let Some(scale) = s.strip_prefix("auto*") {
        return scale
            .parse()
            .map(Rho::AutoScaled)
            .map_err(|_| Error::Config(format!("bad rho scale `{scale}`")));
    }
    s.parse()
        .map(Rho::Fixed)
        .map_err(|_| Error::Config(format!("rho must be `auto`, `auto*<scale>` or a number, got `{s}`")))
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "fixed_point" => Ok(Method::FixedPoint),
        "newton" => Ok(Method::Newton),
        other => config(format!("unknown solver method `{other}`")),
    }
}

/// A config turned into operators.
pub struct Built {
    pub space: Arc<HilbertSpace>,
    pub a: Arc<dyn SingleValuedOp>,
    pub b: Arc<dyn ResolventOp>,
    pub phi: Option<Arc<dyn PhiOp>>,
    pub param_dim: usize,
    pub solver: SolverConfig,
    pub case: SmallnessCase,
    pub potential: bool,
    pub seed: u64,
    pub is_shrink: bool,
}

impl Built {
    pub fn ge(&self) -> GeProblem {
        GeProblem::new(self.space.clone(), self.a.clone(), self.b.clone())
    }

    pub fn qvi(&self) -> Result<QviProblem> {
        let Some(phi) = &self.phi else {
            return config("config has no Phi; a QVI command needs one");
        };
        Ok(QviProblem::new(self.space.clone(), self.a.clone(), self.b.clone(), phi.clone())
            .with_case(self.case)
            .with_potential(self.potential))
    }
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return config(format!("unsupported config version `{}`, expected `{CONFIG_VERSION}`", cfg.version));
        }
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Built> {
        let space = Arc::new(HilbertSpace::from_spec(&self.space)?);
        let n = space.dim();
        let c = &self.constants;
        for (name, v) in [("mu", c.mu), ("lip", c.lip), ("lip_phi", c.lip_phi)] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 || (v == 0.0 && name != "lip_phi") {
                    return config(format!("constant {name} must be positive, got {v}"));
                }
            }
        }

        let (a_raw, param_dim): (Arc<dyn SingleValuedOp>, usize) = match &self.a {
            ASpec::Affine {
                matrix: m,
                param_matrix,
                offset,
                tanh_weight,
            } => {
                let m = matrix(m, n, "A matrix")?;
                let p = match param_matrix {
                    Some(p) => matrix(p, n, "A param_matrix")?,
                    None => DMatrix::zeros(n, 0),
                };
                let offset = offset.clone().unwrap_or_else(|| vec![0.0; n]);
                let op = AffineOp::new(&space, m, p, offset, *tanh_weight)?;
                let d = op.param_dim();
                (Arc::new(op), d)
            }
            ASpec::Quasilinear { beta } => (Arc::new(QuasilinearOp::new(n, *beta)?), n),
        };
        let a: Arc<dyn SingleValuedOp> = match (c.mu, c.lip) {
            (None, None) => a_raw,
            (mu, lip) => {
                let own = a_raw.constants();
                let constants = MonotoneConstants::new(mu.unwrap_or(own.mu), lip.unwrap_or(own.lip))?;
                Arc::new(DeclaredOp { inner: a_raw, constants })
            }
        };

        let mut is_shrink = false;
        let b: Arc<dyn ResolventOp> = match &self.b {
            BSpec::Box { lower, upper } => {
                let lo = lower.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
                let hi = upper.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect();
                Arc::new(BoxNormalCone::new(&space, lo, hi)?)
            }
            BSpec::Shrink {} => {
                is_shrink = true;
                if param_dim != n {
                    return config(format!("shrink B needs a parameter of dimension {n}, A provides {param_dim}"));
                }
                Arc::new(WeightedShrinkage::new(&space)?)
            }
            BSpec::Linear { matrix: m } => Arc::new(LinearMonotoneB::new(&space, matrix(m, n, "B matrix")?)?),
        };

        let phi: Option<Arc<dyn PhiOp>> = match &self.phi {
            None => None,
            Some(spec) => {
                let raw: Arc<dyn PhiOp> = match spec {
                    PhiSpec::Constant { value } => {
                        if value.len() != n {
                            return config(format!("Phi value must have length {n}, got {}", value.len()));
                        }
                        Arc::new(AbsAffinePhi::constant(value.clone()))
                    }
                    PhiSpec::AbsAffine {
                        alpha,
                        offset,
                        tau,
                        param_matrix,
                    } => {
                        if offset.len() != n {
                            return config(format!("Phi offset must have length {n}, got {}", offset.len()));
                        }
                        if !space.is_diagonal() {
                            return config("abs_affine Phi requires a diagonal Gram");
                        }
                        let p = param_matrix.as_ref().map(|p| matrix(p, n, "Phi param_matrix")).transpose()?;
                        Arc::new(AbsAffinePhi::new(*alpha, offset.clone(), *tau, p)?)
                    }
                };
                Some(match c.lip_phi {
                    Some(lip) if lip != raw.lip() => {
                        if lip < raw.lip() {
                            return config(format!(
                                "declared lip_phi = {lip} is below the Lipschitz constant {} of Phi",
                                raw.lip()
                            ));
                        }
                        Arc::new(DeclaredPhi { inner: raw, lip })
                    }
                    _ => raw,
                })
            }
        };

        let mut solver = SolverConfig::default();
        let s = &self.solver;
        if let Some(r) = &s.rho {
            solver.rho = match r {
                RhoSpec::Keyword(k) => parse_rho(k)?,
                RhoSpec::Value(v) => Rho::Fixed(*v),
                RhoSpec::Scaled { auto_scale } => Rho::AutoScaled(*auto_scale),
            };
        }
        if let Some(t) = s.tol_residual {
            solver.tol_residual = t;
        }
        if let Some(m) = s.max_iters {
            solver.max_iters = m;
        }
        if let Some(m) = &s.method {
            solver.method = parse_method(m)?;
        }
        solver.numeric_fallback = s.numeric_fallback;
        match &s.y0 {
            None => {}
            Some(StartSpec::Keyword(k)) if k == "zero" => {}
            Some(StartSpec::Keyword(k)) => return config(format!("y0 must be \"zero\" or a vector, got `{k}`")),
            Some(StartSpec::Vector(v)) => {
                if v.len() != n {
                    return config(format!("y0 must have length {n}, got {}", v.len()));
                }
                solver.y0 = Some(Primal::from_vec(v.clone()));
            }
        }
        solver.validate()?;
        // validates rho against the constants up front
        ge::resolve_rho(solver.rho, a.constants())?;

        let case = match self.smallness_case {
            None | Some(CaseSpec::Auto) => SmallnessCase::Auto,
            Some(CaseSpec::A) => SmallnessCase::A,
            Some(CaseSpec::B) => SmallnessCase::B,
        };
        let seed = match std::env::var("GESENS_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("GESENS_SEED must be an unsigned integer, got `{v}`")))?,
            Err(_) => self.seed,
        };
        Ok(Built {
            space,
            a,
            b,
            phi,
            param_dim,
            solver,
            case,
            potential: self.potential,
            seed,
            is_shrink,
        })
    }
}

// ---------------------------------------------------------------------------
// plumbing

enum Failure {
    Lib(Error),
    Io(String),
    Property(Value),
    NonConverged(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<Vec<Artifact>, Failure>;

struct Artifact {
    name: &'static str,
    body: String,
}

fn json_artifact(name: &'static str, value: Value) -> Artifact {
    let mut text = serde_json::to_string_pretty(&round_floats(value)).expect("JSON values serialize");
    text.push('\n');
    Artifact { name, body: text }
}

/// Rounds every float to 15 significant digits for reproducible output.
fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("checked f64");
            let r: f64 = format!("{x:.14e}").parse().expect("formatted float parses");
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

fn fmt_float(x: f64) -> String {
    format!("{x:.14e}")
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| Error::Config(format!("vector: {e}")));
    }
    t.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("not a number: `{s}`"))))
        .collect()
}

/// Inline JSON array or `@path`.
fn vector_arg(arg: &str) -> std::result::Result<Vec<f64>, Failure> {
    match arg.strip_prefix('@') {
        Some(path) => Ok(parse_numbers(&read_text(Path::new(path))?)?),
        None => Ok(parse_numbers(arg)?),
    }
}

fn param_arg(arg: &str, dim: usize, what: &str) -> std::result::Result<Param, Failure> {
    let v = vector_arg(arg)?;
    if v.len() != dim {
        return Err(Error::Config(format!("{what} must have length {dim}, got {}", v.len())).into());
    }
    Ok(Param::from_vec(v))
}

fn load(common: &Common) -> std::result::Result<(Built, Param), Failure> {
    let cfg = ProblemConfig::parse(&read_text(&common.config)?)?;
    let mut built = cfg.build()?;
    if let Some(r) = &common.rho {
        built.solver.rho = parse_rho(r)?;
    }
    if let Some(t) = common.tol {
        built.solver.tol_residual = t;
    }
    if let Some(m) = common.solver {
        built.solver.method = match m {
            MethodArg::FixedPoint => Method::FixedPoint,
            MethodArg::Newton => Method::Newton,
        };
    }
    built.solver.validate()?;
    ge::resolve_rho(built.solver.rho, built.a.constants())?;
    let u = param_arg(&common.u, built.param_dim, "u")?;
    Ok((built, u))
}

fn write_atomic(dir: &Path, artifacts: &[Artifact]) -> std::result::Result<(), Failure> {
    let io = |e: std::io::Error| Failure::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    for a in artifacts {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(a.body.as_bytes()).map_err(io)?;
        tmp.persist(dir.join(a.name)).map_err(|e| io(e.error))?;
    }
    Ok(())
}

fn smallness_gate(prob: &QviProblem, u: &Param, seed: u64) -> std::result::Result<qvi::SmallnessReport, Failure> {
    let report = qvi::check_smallness(prob)?;
    if report.case == SmallnessCase::B {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let region = Region::unit_ball(prob.space.zeros());
        let audit = qvi::audit_potential(prob, u, &region, 200, &mut rng)?;
        if !audit.pass {
            return Err(Failure::Property(json!({
                "error": "potential flag audit failed: A' is not symmetric",
                "smallness": to_value(&report),
                "audit": to_value(&audit),
            })));
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// commands

fn ge_solve(args: &SolveArgs) -> CmdResult {
    let (built, u) = load(&args.common)?;
    let report = ge::solve(&built.ge(), &u, &built.solver)?;
    let value = to_value(&report);
    if !report.converged() {
        return Err(Failure::NonConverged(value));
    }
    Ok(vec![json_artifact("report.json", value)])
}

fn ge_sens(args: &SensArgs) -> CmdResult {
    let (built, u) = load(&args.common)?;
    let h = param_arg(&args.h, built.param_dim, "h")?;
    let prob = built.ge();
    let base = ge::solve(&prob, &u, &built.solver)?.into_converged("base solve")?;
    let delta = ge::sensitivity(&prob, &u, &base.y, &h, &built.solver)?;
    let table = ge::fd_oracle_sensitivity(&prob, &u, &h, &args.steps, &built.solver)?;
    let gap = prob.space.distance(&delta.y, table.smallest())?;
    Ok(vec![json_artifact(
        "sens.json",
        json!({
            "y_star": base.y,
            "delta": delta.y,
            "oracle": table.smallest(),
            "steps": table.steps,
            "drift": table.final_drift(),
            "drifts": table.drifts,
            "gap": gap,
            "iters": delta.iters,
        }),
    )])
}

fn qvi_solve(args: &QviSolveArgs) -> CmdResult {
    let (built, u) = load(&args.common)?;
    let prob = built.qvi()?;
    let smallness = smallness_gate(&prob, &u, built.seed)?;
    let anchor = args.anchor.as_deref().map(vector_arg).transpose()?.map(Primal::from_vec);
    let cfg = &built.solver;
    let mut out = json!({ "smallness": to_value(&smallness) });
    let mut converged = true;
    let mut ys = Vec::new();
    if args.approach != Approach::Iter {
        let t = qvi::solve_transformation(&prob, &u, cfg)?;
        converged &= t.ge.converged();
        ys.push(t.y.clone());
        out["transformation"] = to_value(&t);
    }
    if args.approach != Approach::Transfo {
        let it = qvi::solve_iteration(&prob, &u, cfg, anchor.as_ref())?;
        converged &= it.converged();
        ys.push(it.y.clone());
        out["iteration"] = to_value(&it);
    }
    if let [a, b] = ys.as_slice() {
        out["distance"] = json!(prob.space.distance(a, b)?);
    }
    out["y"] = to_value(&ys[0]);
    if !converged {
        return Err(Failure::NonConverged(out));
    }
    Ok(vec![json_artifact("qvi_solve.json", out)])
}

fn qvi_reference(prob: &QviProblem, u: &Param, cfg: &SolverConfig) -> Result<Primal> {
    let t = qvi::solve_transformation(prob, u, cfg)?;
    t.ge.into_converged("reference solve")?;
    Ok(t.y)
}

fn qvi_sens(args: &QviSensArgs) -> CmdResult {
    let (built, u) = load(&args.common)?;
    let h = param_arg(&args.h, built.param_dim, "h")?;
    let prob = built.qvi()?;
    smallness_gate(&prob, &u, built.seed)?;
    let cfg = &built.solver;
    let y_star = qvi_reference(&prob, &u, cfg)?;
    let mut out = json!({ "y_star": y_star });
    let mut deltas = Vec::new();
    if args.approach != Approach::Iter {
        let d = qvi::sensitivity_transformation(&prob, &u, &y_star, &h, cfg)?;
        out["delta_transformation"] = to_value(&d);
        deltas.push(d);
    }
    if args.approach != Approach::Transfo {
        let it = qvi::sensitivity_iteration(&prob, &u, &y_star, &h, cfg)?;
        out["stages"] = json!(it.stages);
        let it = it.into_converged("sensitivity iteration")?;
        out["delta_iteration"] = to_value(&it.y);
        deltas.push(it.y);
    }
    if let [a, b] = deltas.as_slice() {
        out["gap"] = json!(prob.space.distance(a, b)?);
    }
    out["delta"] = to_value(&deltas[0]);
    Ok(vec![json_artifact("qvi_sens.json", out)])
}

fn qvi_diag(args: &QviDiagArgs) -> CmdResult {
    let (built, u) = load(&args.common)?;
    let prob = built.qvi()?;
    let smallness = smallness_gate(&prob, &u, built.seed)?;
    let h = match &args.h {
        Some(h) => param_arg(h, built.param_dim, "h")?,
        None => Param::from_vec(vec![1.0; built.param_dim]),
    };
    let cfg = &built.solver;
    let rho = ge::resolve_rho(cfg.rho, prob.a.constants())?;
    let y_star = qvi_reference(&prob, &u, cfg)?;
    let c = ge::contraction_factor(rho, prob.a.constants());
    let mut table = Vec::new();
    for t in [1e-1, 1e-2, 1e-3, 1e-4] {
        let value = qvi::c_rho_diagnostic(&prob, &u.add_scaled(t, &h), &u, &y_star, rho)?;
        table.push(json!({ "t": t, "c_rho": value, "ratio": value / t }));
    }
    Ok(vec![json_artifact(
        "qvi_diag.json",
        json!({
            "smallness": to_value(&smallness),
            "rho": rho,
            "c": c,
            "y_star": y_star,
            "c_rho_table": table,
        }),
    )])
}

fn read_vector_file(path: &Option<PathBuf>, n: usize, default: impl Fn(usize) -> f64) -> std::result::Result<Vec<f64>, Failure> {
    match path {
        None => Ok((0..n).map(default).collect()),
        Some(p) => {
            let v = parse_numbers(&read_text(p)?)?;
            if v.len() != n {
                return Err(Error::Config(format!("{} must have {n} entries, got {}", p.display(), v.len())).into());
            }
            Ok(v)
        }
    }
}

fn random_sparse(n: usize, seed: u64) -> SparseSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &m * m.transpose() / n as f64 + DMatrix::identity(n, n);
    let q = (&q + q.transpose()) * 0.5;
    SparseSpec {
        weights: (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
        q: (0..n).map(|i| q.row(i).iter().copied().collect()).collect(),
        b: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn sensitivity_csv(delta: &Primal, oracle: &Primal) -> String {
    let mut s = String::from("index,delta,fd_oracle,gap\n");
    for i in 0..delta.len() {
        s.push_str(&format!(
            "{i},{},{},{}\n",
            fmt_float(delta[i]),
            fmt_float(oracle[i]),
            fmt_float((delta[i] - oracle[i]).abs())
        ));
    }
    s
}

fn app_sparse(args: &SparseArgs) -> CmdResult {
    let spec: SparseSpec = match &args.spec {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("sparse spec: {e}")))?,
        None => random_sparse(args.n, args.seed),
    };
    let n = spec.weights.len();
    let prob = apps::build_sparse(&spec)?;
    let u = Param::from_vec(read_vector_file(&args.u_file, n, |_| 0.5)?);
    let cfg = SolverConfig::default();
    let report = ge::solve(&prob, &u, &cfg)?;
    if !report.converged() {
        return Err(Failure::NonConverged(to_value(&report)));
    }
    let mut csv = String::from("index,y\n");
    for i in 0..n {
        csv.push_str(&format!("{i},{}\n", fmt_float(report.y[i])));
    }
    let mut out = vec![
        json_artifact(
            "report.json",
            json!({ "spec": to_value(&spec), "report": to_value(&report), "objective": spec.objective(&report.y, &u)? }),
        ),
        Artifact { name: "solution.csv", body: csv },
    ];
    if args.h_file.is_some() {
        let h = Param::from_vec(read_vector_file(&args.h_file, n, |_| 0.0)?);
        let delta = ge::sensitivity(&prob, &u, &report.y, &h, &cfg)?;
        let table = ge::fd_oracle_sensitivity(&prob, &u, &h, &DEFAULT_FD_STEPS, &cfg)?;
        out.push(Artifact {
            name: "sensitivity.csv",
            body: sensitivity_csv(&delta.y, table.smallest()),
        });
    }
    Ok(out)
}

fn app_quasilinear(args: &QuasilinearArgs) -> CmdResult {
    let spec = QuasilinearSpec {
        n: args.n,
        beta: args.beta,
        alpha: args.alpha,
        obstacle: args.obstacle,
        psi0: args.psi0,
        phi: match args.phi {
            PhiArg::Smoothed => PhiKind::Smoothed,
            PhiArg::Exact => PhiKind::Exact,
            PhiArg::Zero => PhiKind::Zero,
        },
        ..Default::default()
    };
    let prob = apps::build_quasilinear(&spec)?;
    let n = spec.n;
    let u = Param::from_vec(read_vector_file(&args.u_file, n, |_| -1.0)?);
    let cfg = SolverConfig::default().with_method(Method::Newton);
    let smallness = qvi::check_smallness(&prob)?;
    let both = qvi::solve_both(&prob, &u, &cfg, None)?;
    let value = json!({ "spec": to_value(&spec), "smallness": to_value(&smallness), "solve": to_value(&both) });
    if !(both.transformation.ge.converged() && both.iteration.converged()) {
        return Err(Failure::NonConverged(value));
    }
    let y = &both.transformation.y;
    let mut csv = String::from("index,x,y\n");
    for (i, x) in spec.nodes().iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", fmt_float(*x), fmt_float(y[i])));
    }
    let mut out = vec![json_artifact("report.json", value), Artifact { name: "solution.csv", body: csv }];
    if args.h_file.is_some() {
        let h = Param::from_vec(read_vector_file(&args.h_file, n, |_| 0.0)?);
        let sens = qvi::sensitivity_both(&prob, &u, y, &h, &cfg)?;
        let t = 1e-5;
        let tight = cfg.clone().with_tol(1e-12);
        let moved = qvi::solve_transformation(&prob, &u.add_scaled(t, &h), &tight)?.y;
        let oracle = (&moved - y).scale(1.0 / t);
        out.push(Artifact {
            name: "sensitivity.csv",
            body: sensitivity_csv(&sens.transformation, &oracle),
        });
        out.push(json_artifact("sensitivity.json", to_value(&sens)));
    }
    Ok(out)
}

fn verify(args: &VerifyArgs) -> CmdResult {
    let cfg = ProblemConfig::parse(&read_text(&args.config)?)?;
    let built = cfg.build()?;
    let u = match &args.u {
        Some(u) => param_arg(u, built.param_dim, "u")?,
        None => Param::zeros(built.param_dim),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(built.seed);
    let space = built.space.as_ref();
    let region = Region::unit_ball(space.zeros());
    let trials = args.trials.max(1);
    let grad = |y: &Primal| built.a.eval(y, &u);
    let constants = built.a.constants();
    let mut reports: Vec<PropertyReport> = Vec::new();
    match args.suite {
        Suite::Cocoercive => {
            let pairs = sample_pairs(&region, trials, &mut rng);
            reports.push(oracle::check_cocoercivity(space, &grad, constants.lip, &pairs)?);
        }
        Suite::Combined => {
            let pairs = sample_pairs(&region, trials, &mut rng);
            reports.push(oracle::check_combined_inequality(space, &grad, constants.mu, constants.lip, &pairs)?);
        }
        Suite::Constants => {
            let pairs = sample_pairs(&region, trials, &mut rng);
            let est = oracle::estimate_constants(space, built.a.as_ref(), &u, &pairs)?;
            reports.push(oracle::audit_constants(Some(constants.mu), constants.lip, &est, 1e-9));
            if let Some(phi) = &built.phi {
                let est = oracle::estimate_phi_lipschitz(space, phi.as_ref(), &u, &pairs)?;
                let mut r = oracle::audit_constants(None, phi.lip(), &est, 1e-9);
                r.property = "phi_constants".into();
                reports.push(r);
            }
        }
        Suite::Prox => {
            if !built.is_shrink {
                return Err(Error::Config("the prox suite needs B of type shrink".into()).into());
            }
            let mut r = PropertyReport::new("prox", 1e-6);
            for _ in 0..trials {
                let q: f64 = rng.random_range(-3.0..3.0);
                let w: f64 = rng.random_range(0.0..2.0);
                let rho: f64 = rng.random_range(0.1..2.0);
                let exact = shrink(q, rho * w);
                let brute = oracle::brute_force_prox(q, w, rho, 2001);
                r.record((exact - brute).abs(), 1.0, || vec![q, w, rho]);
            }
            reports.push(r.finish());
        }
        Suite::Firm => {
            let rho = ge::resolve_rho(built.solver.rho, constants)?;
            reports.push(check_firm_nonexpansive(built.b.as_ref(), space, rho, &u, trials, 1.0, &mut rng)?);
        }
        Suite::Symmetry => {
            reports.push(oracle::check_derivative_symmetry(space, built.a.as_ref(), &u, &region, trials, &mut rng)?);
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    let value = json!({ "suite": format!("{:?}", args.suite).to_lowercase(), "pass": pass, "reports": to_value(&reports) });
    if !pass {
        return Err(Failure::Property(value));
    }
    Ok(vec![json_artifact("verify.json", value)])
}

fn error_value(e: &Error) -> Value {
    match e {
        Error::SmallnessViolated {
            gamma,
            lip_phi,
            bound_general,
            bound_potential,
        } => json!({
            "error": "smallness_violated",
            "message": e.to_string(),
            "gamma_a": gamma,
            "lip_phi": lip_phi,
            "bound_general": bound_general,
            "bound_potential": bound_potential,
        }),
        other => json!({ "error": "failed", "message": other.to_string() }),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConverged { .. } | Error::NonConvergedDerivative { .. } | Error::NotASolution(_) => EXIT_NONCONVERGED,
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::SmallnessViolated { .. } | Error::MissingDerivative(_) => {
            EXIT_CONFIG
        }
    }
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    let out = match cmd {
        Command::Ge(GeCommand::Solve(a)) => &a.common.out,
        Command::Ge(GeCommand::Sens(a)) => &a.common.out,
        Command::Qvi(QviCommand::Solve(a)) => &a.common.out,
        Command::Qvi(QviCommand::Sens(a)) => &a.common.out,
        Command::Qvi(QviCommand::Diag(a)) => &a.common.out,
        Command::App(AppCommand::Sparse(a)) => &a.out,
        Command::App(AppCommand::Quasilinear(a)) => &a.out,
        Command::Verify(a) => &a.out,
    };
    out.as_deref()
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Ge(GeCommand::Solve(a)) => ge_solve(a),
        Command::Ge(GeCommand::Sens(a)) => ge_sens(a),
        Command::Qvi(QviCommand::Solve(a)) => qvi_solve(a),
        Command::Qvi(QviCommand::Sens(a)) => qvi_sens(a),
        Command::Qvi(QviCommand::Diag(a)) => qvi_diag(a),
        Command::App(AppCommand::Sparse(a)) => app_sparse(a),
        Command::App(AppCommand::Quasilinear(a)) => app_quasilinear(a),
        Command::Verify(a) => verify(a),
    };
    let (artifacts, code) = match result {
        Ok(a) => (a, EXIT_OK),
        Err(Failure::Lib(e)) => {
            eprintln!("{}", round_floats(error_value(&e)));
            return exit_code(&e);
        }
        Err(Failure::Io(msg)) => {
            eprintln!("{}", json!({ "error": "io", "message": msg }));
            return EXIT_IO;
        }
        Err(Failure::Property(v)) => (vec![json_artifact("failure.json", v)], EXIT_PROPERTY),
        Err(Failure::NonConverged(v)) => (vec![json_artifact("nonconverged.json", v)], EXIT_NONCONVERGED),
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for a in &artifacts {
        if a.name.ends_with(".json") {
            let _ = lock.write_all(a.body.as_bytes());
        }
    }
    if let Some(dir) = out_dir(&cli.command) {
        if let Err(Failure::Io(msg)) = write_atomic(dir, &artifacts) {
            eprintln!("{}", json!({ "error": "io", "message": msg }));
            return EXIT_IO;
        }
    }
    code
}
