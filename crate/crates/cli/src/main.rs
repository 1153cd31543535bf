//! `vrm`: batch experiments for virtual relation matching.
//!
//! Exit codes: 0 ok, 1 property failure, 2 bad flags or configuration,
//! 3 missing or unreadable input artifact, 4 numeric divergence.

mod manifest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vrm_core::autodiff::Fault;
use vrm_core::check::{run_checks, CheckOptions};
use vrm_core::config::parse_kv;
use vrm_core::data::{make_synthetic_dataset, Dataset, DatasetKind, SyntheticSpec};
use vrm_core::desk::{self, cells_csv, run_sweep, summary_csv, SweepSpec};
use vrm_core::diagnostics::{gradient_diffusion_pilot, logit_stats, median, median_off_target, pilot_csv, PilotLoss, PilotSpec};
use vrm_core::model::{Activation, Mlp, MlpSpec};
use vrm_core::train::{breakdown_csv, distill_student, train_teacher, Objective, TrainConfig, TrainOutcome};
use vrm_core::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "vrm", version, about = "Virtual relation matching distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a teacher with cross-entropy.
    TrainTeacher(TeacherArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Sweep objectives or one hyperparameter over seeds.
    Ablate(AblateArgs),
    /// Spurious-sample gradient diffusion study.
    Pilot(PilotArgs),
    /// Gradient and oracle verification suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "spirals")]
    kind: String,
    #[arg(long, default_value_t = desk::CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = desk::DIM)]
    dim: usize,
    #[arg(long, default_value_t = desk::PER_CLASS)]
    per_class: usize,
    #[arg(long, default_value_t = desk::NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; defaults to a name under the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Training configuration layered as defaults, then `--config`, then
/// `--set`, then the dedicated flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// UEP percentile `m` in (0, 100].
    #[arg(long)]
    uep: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::missing(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply(&parse_kv(&text)?)?;
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 8] = [
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("uep", self.uep.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TeacherArgs {
    #[arg(long)]
    data: PathBuf,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "128,128")]
    hidden: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    /// Run directory name under VRM_RUN_DIR.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value = "vrm")]
    objective: String,
    #[arg(long, default_value = "32")]
    hidden: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Objectives, comma separated.
    #[arg(long, default_value = "gram,angular,vrm")]
    objectives: String,
    /// Seeds, comma separated.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    /// Config key to sweep.
    #[arg(long)]
    param: Option<String>,
    /// Values for `--param`, comma separated.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, default_value = "spirals")]
    kind: String,
    #[arg(long, default_value_t = desk::CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = desk::DIM)]
    dim: usize,
    #[arg(long, default_value_t = desk::PER_CLASS)]
    per_class: usize,
    #[arg(long, default_value_t = desk::NOISE)]
    noise: f64,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct PilotArgs {
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    spurious: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Loss kinds among im, rm, rm_gram; comma separated.
    #[arg(long, default_value = "im,rm,rm_gram")]
    losses: String,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    /// Run a reduced number of instances per property.
    #[arg(long)]
    quick: bool,
    /// Deliberately break one gradient to confirm the suite notices.
    #[arg(long, value_name = "FAULT")]
    inject_fault: Option<String>,
}

/// An error together with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Failure { code: 2, message }
    }

    fn missing(message: String) -> Self {
        Failure { code: 3, message }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::Usage(_) => 2,
            Error::Input(_) | Error::Format(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os("VRM_RUN_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn run_dir(name: &str) -> Result<PathBuf, Failure> {
    let dir = run_root().join(name);
    fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Failure::usage(format!("{what}: cannot parse {p:?}"))))
        .collect()
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let f = File::open(path).map_err(|e| Failure::missing(format!("cannot open dataset {}: {e}", path.display())))?;
    Dataset::read_from(BufReader::new(f))
        .map_err(|e| Failure::missing(format!("cannot read dataset {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Mlp, Failure> {
    let f = File::open(path).map_err(|e| Failure::missing(format!("cannot open checkpoint {}: {e}", path.display())))?;
    Mlp::read_checkpoint(BufReader::new(f))
        .map_err(|e| Failure::missing(format!("cannot read checkpoint {}: {e}", path.display())))
}

fn save_model(model: &Mlp, path: &Path) -> Result<(), Failure> {
    let f = File::create(path).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    model.write_checkpoint(BufWriter::new(f))?;
    Ok(())
}

fn synthetic_spec(kind: &str, classes: usize, dim: usize, per_class: usize, noise: f64, seed: u64) -> Result<SyntheticSpec, Failure> {
    Ok(SyntheticSpec {
        kind: DatasetKind::parse(kind)?,
        classes,
        dim,
        per_class,
        noise,
        seed,
    })
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let spec = synthetic_spec(&a.kind, a.classes, a.dim, a.per_class, a.noise, a.seed)?;
    let data = make_synthetic_dataset(&spec)?;
    let out = match a.out {
        Some(p) => p,
        None => run_dir("data")?.join(format!("{}-c{}-d{}-s{}.vrmdata", a.kind, a.classes, a.dim, a.seed)),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    let f = File::create(&out).map_err(|e| Failure::usage(format!("cannot write {}: {e}", out.display())))?;
    data.write_to(BufWriter::new(f))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn model_spec(data: &Dataset, hidden: &str, activation: &str, seed: u64) -> Result<MlpSpec, Failure> {
    let hidden: Vec<usize> = parse_list("hidden", hidden)?;
    let spec = MlpSpec::new(data.dim(), &hidden, data.classes(), Activation::parse(activation)?, seed);
    spec.validate()?;
    Ok(spec)
}

fn finish_training(dir: &Path, mut manifest: RunManifest, outcome: &TrainOutcome, ckpt: &str) -> Result<(), Failure> {
    write_file(&dir.join("metrics.csv"), &outcome.log.to_csv())?;
    write_file(&dir.join("breakdown.csv"), &breakdown_csv(&outcome.steps))?;
    save_model(&outcome.model, &dir.join(ckpt))?;
    manifest.artifacts.extend(["metrics.csv".into(), "breakdown.csv".into(), ckpt.into()]);
    manifest.finalize(dir, "ok")?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "{}: train_acc {:.4} val_acc {:.4} -> {}",
        manifest.command,
        last.train_acc,
        last.val_acc,
        dir.display()
    );
    Ok(())
}

fn fail_manifest(dir: &Path, mut manifest: RunManifest, e: Error) -> Failure {
    let _ = manifest.finalize(dir, &format!("failed: {e}"));
    e.into()
}

fn cmd_train_teacher(a: TeacherArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve()?;
    let data = load_dataset(&a.data)?;
    let spec = model_spec(&data, &a.hidden, &a.activation, cfg.seed)?;
    let dir = run_dir(a.name.as_deref().unwrap_or(&format!("teacher-s{}", cfg.seed)))?;
    let manifest = RunManifest::start(&dir, "train-teacher", &cfg, vec![cfg.seed], vec![a.data.display().to_string()])?;
    match train_teacher(spec, &data, &cfg) {
        Ok(out) => finish_training(&dir, manifest, &out, "teacher.ckpt"),
        Err(e) => Err(fail_manifest(&dir, manifest, e)),
    }
}

fn cmd_distill(a: DistillArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve()?;
    let objective = Objective::parse(&a.objective)?;
    let teacher = load_model(&a.teacher)?;
    let data = load_dataset(&a.data)?;
    let spec = model_spec(&data, &a.hidden, &a.activation, cfg.seed)?;
    let name = a.name.clone().unwrap_or_else(|| format!("distill-{}-s{}", objective.name(), cfg.seed));
    let dir = run_dir(&name)?;
    let inputs = vec![a.data.display().to_string(), a.teacher.display().to_string()];
    let mut manifest = RunManifest::start(&dir, "distill", &cfg, vec![cfg.seed], inputs)?;
    manifest.config.insert("objective".into(), objective.name().into());
    manifest.write(&dir)?;
    let checksum = teacher.checksum();
    let out = match distill_student(spec, &teacher, &data, &cfg, objective) {
        Ok(out) => out,
        Err(e) => return Err(fail_manifest(&dir, manifest, e)),
    };
    debug_assert_eq!(checksum, teacher.checksum());
    let (val_x, _) = data.subset(data.val_indices())?;
    let stats = logit_stats(&out.model, &val_x)?;
    write_file(&dir.join("logit_stats.csv"), &stats.per_sample_csv())?;
    write_file(&dir.join("logit_hist.csv"), &stats.histogram.to_csv())?;
    manifest.artifacts.extend(["logit_stats.csv".into(), "logit_hist.csv".into()]);
    finish_training(&dir, manifest, &out, "student.ckpt")
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let base = a.cfg.resolve()?;
    let objectives = a
        .objectives
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| Objective::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: Vec<u64> = parse_list("seeds", &a.seeds)?;
    let grid = match (a.param, a.values) {
        (Some(p), Some(v)) => Some((p, v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())),
        (None, None) => None,
        _ => return Err(Failure::usage("--param and --values go together".into())),
    };
    let data = synthetic_spec(&a.kind, a.classes, a.dim, a.per_class, a.noise, 0)?;
    let spec = SweepSpec {
        objectives,
        seeds: seeds.clone(),
        grid,
        base: base.clone(),
        data,
    };
    let dir = run_dir(a.name.as_deref().unwrap_or("ablate"))?;
    let mut manifest = RunManifest::start(&dir, "ablate", &base, seeds, vec![])?;
    if let Some((p, v)) = &spec.grid {
        manifest.config.insert("sweep_param".into(), p.clone());
        manifest.config.insert("sweep_values".into(), v.join(","));
    }
    manifest.write(&dir)?;
    let cells = match run_sweep(&spec) {
        Ok(c) => c,
        Err(e) => return Err(fail_manifest(&dir, manifest, e)),
    };
    write_file(&dir.join("cells.csv"), &cells_csv(&cells))?;
    let summary = summary_csv(&cells);
    write_file(&dir.join("summary.csv"), &summary)?;
    manifest.artifacts.extend(["cells.csv".into(), "summary.csv".into()]);
    manifest.finalize(&dir, "ok")?;
    print!("{summary}");
    Ok(())
}

fn cmd_pilot(a: PilotArgs) -> Result<(), Failure> {
    let losses = a
        .losses
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| PilotLoss::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if losses.is_empty() || a.seeds == 0 {
        return Err(Failure::usage("pilot needs at least one loss kind and one seed".into()));
    }
    let dir = run_dir(a.name.as_deref().unwrap_or("pilot"))?;
    let mut manifest = RunManifest::start(&dir, "pilot", &TrainConfig::default(), (0..a.seeds).collect(), vec![])?;
    manifest.config.clear();
    for (k, v) in [
        ("batch", a.batch.to_string()),
        ("dim", a.dim.to_string()),
        ("spurious", a.spurious.to_string()),
        ("noise_scale", a.noise_scale.to_string()),
        ("losses", a.losses.clone()),
    ] {
        manifest.config.insert(k.into(), v);
    }
    manifest.write(&dir)?;
    let mut summary = String::from("loss,seed,median_off_target,max_off_target,spurious_delta_g\n");
    let mut medians: Vec<(PilotLoss, f64)> = Vec::new();
    for &loss in &losses {
        for seed in 0..a.seeds {
            let spec = PilotSpec {
                batch: a.batch,
                dim: a.dim,
                spurious_index: a.spurious,
                noise_scale: a.noise_scale,
                seed,
                loss,
            };
            let dg = gradient_diffusion_pilot(&spec)?;
            let file = format!("pilot-{}-s{seed}.csv", loss.name());
            write_file(&dir.join(&file), &pilot_csv(&dg, a.spurious))?;
            manifest.artifacts.push(file);
            let med = median_off_target(&dg, a.spurious);
            let max = dg
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != a.spurious)
                .map(|(_, d)| d.abs())
                .fold(0.0, f64::max);
            summary.push_str(&format!("{},{seed},{med},{max},{}\n", loss.name(), dg[a.spurious]));
            medians.push((loss, med));
        }
    }
    write_file(&dir.join("summary.csv"), &summary)?;
    manifest.artifacts.push("summary.csv".into());
    manifest.finalize(&dir, "ok")?;
    let pooled = |k: PilotLoss| {
        let mut v: Vec<f64> = medians.iter().filter(|m| m.0 == k).map(|m| m.1).collect();
        (!v.is_empty()).then(|| median(&mut v))
    };
    for &loss in &losses {
        println!("{}: median off-target |delta_g| {:e}", loss.name(), pooled(loss).unwrap_or(0.0));
    }
    if let (Some(im), Some(rm)) = (pooled(PilotLoss::Im), pooled(PilotLoss::Rm)) {
        if im > 0.0 {
            println!("diffusion ratio rm/im: {}", rm / im);
        } else {
            println!("diffusion ratio rm/im: unbounded (im off-target change is exactly 0)");
        }
    }
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<(), Failure> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("huber-grad-sign") => Some(Fault::HuberGradSign),
        Some(other) => return Err(Failure::usage(format!("unknown fault {other:?}; known: huber-grad-sign"))),
    };
    let report = run_checks(CheckOptions { quick: a.quick, fault });
    for r in &report.results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if report.all_passed() {
        println!("all {} properties passed", report.results.len());
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        Err(Failure {
            code: 1,
            message: format!("failed properties: {}", names.join(", ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Pilot(a) => cmd_pilot(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
