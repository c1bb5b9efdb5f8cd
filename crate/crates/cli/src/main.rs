use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use shallow_core::circuit::{self, Circuit, SCHEMA_VERSION};
use shallow_core::clifford::{tableau_to_nn_circuit, teleport_compile, CliffordError, CliffordTableau};
use shallow_core::ensembles::{build, sample_unitary, EnsembleError, EnsembleSpec, Kind, Lowering, SourceKind};
use shallow_core::sim::{SimError, Simulator, DEFAULT_CAP};
use shallow_core::verify::{
    distinguish, distinguisher_to_report, distinguishers_suite, implementation_report, moments_suite, reports_json,
    Distinguisher, Report, Verdict, VerifyError,
};

#[derive(Parser)]
#[command(
    name = "shallow",
    version,
    about = "Build, lower and check constant-depth random unitary ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one circuit from an ensemble and write it as JSON
    Build {
        #[command(flatten)]
        ens: EnsembleArgs,
        /// none | qac0f | measff
        #[arg(long, default_value = "none")]
        lower: Lowering,
        /// JSON output file; nothing is written without it
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cap: CapArg,
    },
    /// Lower a Clifford circuit file, or an ensemble draw, to native gates
    Lower {
        /// Circuit JSON holding an ancilla-free Clifford circuit
        #[arg(long)]
        circuit: Option<PathBuf>,
        #[command(flatten)]
        ens: EnsembleArgs,
        /// qac0f | measff
        #[arg(long, default_value = "measff")]
        lower: Lowering,
        /// JSON output file; nothing is written without it
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cap: CapArg,
    },
    /// Run a verification suite on an ensemble or a built circuit
    Verify {
        /// Circuit JSON written by `build`; its recorded ensemble is used
        #[arg(long)]
        circuit: Option<PathBuf>,
        /// Circuit JSON whose unitary is the implementation target
        #[arg(long, requires = "circuit")]
        reference: Option<PathBuf>,
        #[command(flatten)]
        ens: EnsembleArgs,
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Monte Carlo draws per estimate
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Lowering checked by the implementation suite (qac0f | measff)
        #[arg(long, default_value = "qac0f")]
        lower: Lowering,
        /// Implementation error tolerance
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// JSON output file; nothing is written without it
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cap: CapArg,
    },
    /// Compare two ensembles with concrete distinguishers
    Distinguish {
        #[command(flatten)]
        ens: EnsembleArgs,
        /// Ensemble kind to compare against
        #[arg(long, default_value = "haar")]
        against: Kind,
        /// Qubit count of the second ensemble [default: --n]
        #[arg(long)]
        against_n: Option<usize>,
        /// Comma-separated: collision, purity, swap, bell, collision_inverse, moments
        #[arg(long, default_value = "collision,purity,swap", value_delimiter = ',')]
        tests: Vec<Distinguisher>,
        /// Draws from each ensemble
        #[arg(long, visible_alias = "shots", default_value_t = 1000)]
        samples: usize,
        /// JSON output file; nothing is written without it
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cap: CapArg,
    },
    /// Print supported kinds and defaults, or summarise a circuit file
    Info {
        #[arg(long)]
        circuit: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct EnsembleArgs {
    /// haar | clifford | pauli | cpfc | glued | pru | singleton
    #[arg(long, default_value = "cpfc")]
    ensemble: Kind,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Moment target; twise sources are 2t-wise independent
    #[arg(long, default_value_t = 2)]
    t: usize,
    /// Patch width for glued and pru [default for pru: n]
    #[arg(long)]
    patch_size: Option<usize>,
    /// Patch ensemble for glued
    #[arg(long, default_value = "clifford")]
    patch_kind: Kind,
    /// twise | prf | table [default: prf for pru, else twise]
    #[arg(long)]
    source: Option<SourceKind>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl EnsembleArgs {
    fn spec(&self) -> EnsembleSpec {
        let mut spec = EnsembleSpec::new(self.ensemble, self.n, self.t, self.seed);
        if let Some(size) = self.patch_size {
            let kind = if self.ensemble == Kind::Pru {
                Kind::Cpfc
            } else {
                self.patch_kind
            };
            spec = spec.with_patch(size, kind);
        }
        if let Some(s) = self.source {
            spec = spec.with_source(s);
        }
        spec
    }
}

#[derive(Args, Clone, Copy)]
struct CapArg {
    /// Largest simulated register in qubits; a dense n-qubit unitary counts as 2n
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Suite {
    Moments,
    Distinguishers,
    Implementation,
    All,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Moments => "moments",
            Suite::Distinguishers => "distinguishers",
            Suite::Implementation => "implementation",
            Suite::All => "all",
        }
    }
}

struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Failure {
        let code = if matches!(e, SimError::CapExceeded { .. }) {
            3
        } else {
            2
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<CliffordError> for Failure {
    fn from(e: CliffordError) -> Failure {
        let code = if matches!(e, CliffordError::CapExceeded { .. }) {
            3
        } else {
            2
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<EnsembleError> for Failure {
    fn from(e: EnsembleError) -> Failure {
        match e {
            EnsembleError::Sim(s) => s.into(),
            EnsembleError::Clifford(c) => c.into(),
            e => usage(e.to_string()),
        }
    }
}

impl From<VerifyError> for Failure {
    fn from(e: VerifyError) -> Failure {
        match e {
            VerifyError::Cap(m) => Failure {
                code: 3,
                msg: format!("resource cap: {m}"),
            },
            VerifyError::Sim(s) => s.into(),
            VerifyError::Ensemble(e) => e.into(),
            e => usage(e.to_string()),
        }
    }
}

fn check_dense(n: usize, cap: usize) -> Result<(), Failure> {
    if 2 * n > cap {
        return Err(Failure {
            code: 3,
            msg: format!("dense {n}-qubit unitaries need cap >= {}, have {cap}", 2 * n),
        });
    }
    Ok(())
}

fn read_circuit(path: &Path) -> Result<Circuit, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Circuit::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    if let Some(p) = path {
        std::fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn summary_line(c: &Circuit) -> String {
    format!(
        "model={} n_in={} n_anc={} n_cbits={} depth={} size={}",
        c.model.name(),
        c.n_in,
        c.n_anc,
        c.n_cbits,
        c.depth(),
        c.size()
    )
}

fn spec_of_circuit(c: &Circuit) -> Result<EnsembleSpec, Failure> {
    let v = c
        .meta
        .get("ensemble")
        .ok_or_else(|| usage("circuit carries no ensemble record"))?;
    serde_json::from_value(v.clone()).map_err(|e| usage(format!("bad ensemble record: {e}")))
}

fn report_document(command: &str, config: Value, reports: &[Report]) -> String {
    let body: Value = serde_json::from_str(&reports_json(reports)).expect("own output");
    let doc = json!({ "command": command, "config": config, "reports": body["reports"] });
    let mut s = serde_json::to_string_pretty(&doc).expect("serializes");
    s.push('\n');
    s
}

fn print_reports(reports: &[Report]) -> bool {
    for r in reports {
        let verdict = match r.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail => "FAIL",
            Verdict::Info => "info",
        };
        println!(
            "{verdict:<4}  {:<28} value={:<12.6e} stderr={:<10.3e} ref={:<12.6e} sigma={:.2}",
            label(r),
            r.value,
            r.stderr,
            r.reference,
            r.sigma
        );
    }
    let ok = reports.iter().all(|r| r.verdict != Verdict::Fail);
    println!("overall: {}", if ok { "pass" } else { "fail" });
    ok
}

fn label(r: &Report) -> String {
    match r.params.get("t") {
        Some(t) if !r.test.starts_with("distinguish") => format!("{} t={t}", r.test),
        _ => r.test.clone(),
    }
}

fn cmd_build(ens: &EnsembleArgs, lower: Lowering, out: &Option<PathBuf>, cap: usize) -> Result<bool, Failure> {
    let spec = ens.spec();
    spec.validate()?;
    if lower == Lowering::None || matches!(spec.kind, Kind::Glued | Kind::Pru) {
        check_dense(spec.patch.map_or(spec.n, |p| p.size), cap)?;
    }
    let c = build(&spec, lower)?;
    circuit::validate(&c).map_err(|e| usage(format!("built circuit is invalid: {e}")))?;
    println!("{}  {}", spec.kind.name(), summary_line(&c));
    write_out(out, &(c.to_json() + "\n"))?;
    Ok(true)
}

fn cmd_lower(
    file: &Option<PathBuf>,
    ens: &EnsembleArgs,
    lower: Lowering,
    out: &Option<PathBuf>,
    cap: usize,
) -> Result<bool, Failure> {
    let lowered = match file {
        Some(p) => {
            let c = read_circuit(p)?;
            let tab = CliffordTableau::from_circuit(&c)?;
            println!("input     {}", summary_line(&c));
            match lower {
                Lowering::Qac0f => tableau_to_nn_circuit(&tab),
                Lowering::Measff => teleport_compile(&tab)?,
                Lowering::None => return Err(usage("--lower must be qac0f or measff")),
            }
        }
        None => {
            let spec = ens.spec();
            spec.validate()?;
            if matches!(spec.kind, Kind::Glued | Kind::Pru) {
                check_dense(spec.patch.map_or(spec.n, |p| p.size), cap)?;
            }
            let abstract_form = build(&spec, Lowering::None)?;
            println!("abstract  {}", summary_line(&abstract_form));
            build(&spec, lower)?
        }
    };
    println!("lowered   {}", summary_line(&lowered));
    write_out(out, &(lowered.to_json() + "\n"))?;
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    file: &Option<PathBuf>,
    reference: &Option<PathBuf>,
    ens: &EnsembleArgs,
    suite: Suite,
    samples: usize,
    lower: Lowering,
    tol: f64,
    out: &Option<PathBuf>,
    cap: usize,
) -> Result<bool, Failure> {
    let sim = Simulator::new(cap);
    let loaded = file.as_ref().map(|p| read_circuit(p)).transpose()?;
    let spec = match &loaded {
        Some(c) if reference.is_none() || suite != Suite::Implementation => spec_of_circuit(c)?,
        _ => ens.spec(),
    };
    spec.validate()?;
    if samples < 2 {
        return Err(usage("--samples must be at least 2"));
    }
    check_dense(spec.n, cap)?;
    let mut reports = Vec::new();
    if matches!(suite, Suite::Moments | Suite::All) {
        reports.extend(moments_suite(&spec, samples, spec.seed)?);
    }
    if matches!(suite, Suite::Distinguishers | Suite::All) {
        reports.extend(distinguishers_suite(&spec, samples, spec.seed)?);
    }
    if matches!(suite, Suite::Implementation | Suite::All) {
        let mut params = Map::new();
        let (c, target) = match (&loaded, reference) {
            (Some(c), Some(r)) => (
                c.clone(),
                shallow_core::verify::circuit_matrix(&read_circuit(r)?, &sim)?,
            ),
            (Some(c), None) => (c.clone(), sample_unitary(&spec)?),
            (None, _) => {
                if lower == Lowering::None {
                    return Err(usage("--lower must be qac0f or measff"));
                }
                match build(&spec, lower) {
                    Ok(c) => (c, sample_unitary(&spec)?),
                    Err(EnsembleError::Unsupported(m)) if suite == Suite::All => {
                        reports.push(skipped_implementation(&spec, &m));
                        return finish_verify(&spec, suite, samples, lower, tol, cap, out, &reports);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        params.insert(
            "lowering".into(),
            c.meta.get("lowering").cloned().unwrap_or(json!(lower)),
        );
        let mut r = implementation_report(&c, &target, tol, &sim, params)?;
        r.seed = spec.seed;
        reports.push(r);
    }
    finish_verify(&spec, suite, samples, lower, tol, cap, out, &reports)
}

fn skipped_implementation(spec: &EnsembleSpec, why: &str) -> Report {
    let mut params = Map::new();
    params.insert("skipped".into(), Value::from(why));
    Report {
        test: "implementation".into(),
        params,
        value: 0.0,
        stderr: 0.0,
        reference: 0.0,
        sigma: 0.0,
        verdict: Verdict::Info,
        seed: spec.seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_verify(
    spec: &EnsembleSpec,
    suite: Suite,
    samples: usize,
    lower: Lowering,
    tol: f64,
    cap: usize,
    out: &Option<PathBuf>,
    reports: &[Report],
) -> Result<bool, Failure> {
    let ok = print_reports(reports);
    let config = json!({
        "ensemble": spec,
        "suite": suite.name(),
        "samples": samples,
        "lower": lower,
        "tol": tol,
        "seed": spec.seed,
        "cap": cap,
    });
    write_out(out, &report_document("verify", config, reports))?;
    Ok(ok)
}

#[allow(clippy::too_many_arguments)]
fn cmd_distinguish(
    ens: &EnsembleArgs,
    against: Kind,
    against_n: Option<usize>,
    tests: &[Distinguisher],
    samples: usize,
    out: &Option<PathBuf>,
    cap: usize,
) -> Result<bool, Failure> {
    let a = ens.spec();
    let mut b = EnsembleSpec::new(against, against_n.unwrap_or(a.n), a.t, a.seed);
    if against == Kind::Glued {
        b.patch = a.patch;
    }
    if a.n != b.n {
        return Err(usage(format!("ensembles act on {} and {} qubits", a.n, b.n)));
    }
    check_dense(a.n, cap)?;
    let results = distinguish(&a, &b, tests, samples, a.seed)?;
    let reports: Vec<Report> = results
        .iter()
        .map(|r| distinguisher_to_report(r, &a, &b, samples, a.seed))
        .collect();
    for r in &results {
        println!(
            "{:<18} {:<16} advantage={:.6} stderr={:.3e} threshold={:.3e} {}",
            r.test,
            r.access,
            r.advantage,
            r.stderr,
            r.threshold,
            if r.flagged { "flagged" } else { "not flagged" }
        );
    }
    let ok = reports.iter().all(|r| r.verdict != Verdict::Fail);
    println!("overall: {}", if ok { "indistinguishable" } else { "distinguished" });
    let config = json!({
        "a": a,
        "b": b,
        "tests": tests.iter().map(|t| t.name()).collect::<Vec<_>>(),
        "samples": samples,
        "seed": a.seed,
        "cap": cap,
    });
    write_out(out, &report_document("distinguish", config, &reports))?;
    Ok(ok)
}

fn cmd_info(file: &Option<PathBuf>) -> Result<bool, Failure> {
    if let Some(p) = file {
        let c = read_circuit(p)?;
        println!("{}", summary_line(&c));
        match circuit::validate(&c) {
            Ok(()) => println!("valid"),
            Err(e) => println!("invalid: {e}"),
        }
        for (k, v) in &c.meta {
            println!("{k}: {v}");
        }
        return Ok(true);
    }
    println!("shallow {}", env!("CARGO_PKG_VERSION"));
    println!("circuit schema version: {SCHEMA_VERSION}");
    println!("ensembles: haar clifford pauli cpfc glued pru singleton");
    println!("sources: twise prf table");
    println!("lowerings: none qac0f measff");
    println!("suites: moments distinguishers implementation all");
    println!("distinguishers: collision purity swap bell collision_inverse moments");
    println!("default cap: {DEFAULT_CAP} qubits");
    println!("exit codes: 0 pass, 1 verification failure, 2 usage or input error, 3 resource cap");
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build { ens, lower, out, cap } => cmd_build(ens, *lower, out, cap.cap),
        Command::Lower {
            circuit,
            ens,
            lower,
            out,
            cap,
        } => cmd_lower(circuit, ens, *lower, out, cap.cap),
        Command::Verify {
            circuit,
            reference,
            ens,
            suite,
            samples,
            lower,
            tol,
            out,
            cap,
        } => cmd_verify(circuit, reference, ens, *suite, *samples, *lower, *tol, out, cap.cap),
        Command::Distinguish {
            ens,
            against,
            against_n,
            tests,
            samples,
            out,
            cap,
        } => cmd_distinguish(ens, *against, *against_n, tests, *samples, out, cap.cap),
        Command::Info { circuit } => cmd_info(circuit),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
