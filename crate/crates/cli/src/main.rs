//! `hkd`: synthesize data, train, distill, evaluate, benchmark and ablate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use hkd_core::ablation;
use hkd_core::bench::{estimate_flops, time_inference, ComputeReport};
use hkd_core::checkpoint::{load_params, save_params};
use hkd_core::config::{Phase, TrainConfig};
use hkd_core::dataset::{build_desk_dataset, DatasetIndex, Sample, Split};
use hkd_core::distill::FaLossKind;
use hkd_core::image::{save_image, ImageRGB};
use hkd_core::metrics::QualityReport;
use hkd_core::student::StudentNet;
use hkd_core::teacher::TeacherNet;
use hkd_core::trainer::{evaluate_student, history_csv, train_student, train_teacher, Trained};
use hkd_core::CoreError;
use hkd_tensor::Tensor;

const EXIT_IO: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const GUTTER: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "hkd", version, about = "Lightweight dehazing with super-resolution feature distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Every output of the command goes here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FaArgs {
    /// Feature-affinity loss: l2, l1 or kl.
    #[arg(long)]
    fa_loss: Option<FaLossKind>,
    /// Weight of the feature-affinity term.
    #[arg(long)]
    w_fa: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic hazy/clear dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of image pairs (overrides data.n).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Pre-train the super-resolution teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the student without a teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the student guided by a frozen teacher; trains the teacher
    /// first unless one is given.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fa: FaArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a student checkpoint and draw a hazy / dehazed / clear grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Columns in the image grid.
        #[arg(long, default_value_t = 4)]
        grid: usize,
    },
    /// Parameters, size, FLOPs and latency of the student and teacher.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Run the resolution × w_FA × loss grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also train a student without distillation as a reference row.
        #[arg(long)]
        baseline: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::TrainTeacher { common, .. }
            | Command::TrainStudent { common, .. }
            | Command::Distill { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainStudent { .. } => "train-student",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn phase(&self) -> Phase {
        match self {
            Command::TrainTeacher { .. } => Phase::Teacher,
            Command::TrainStudent { .. } => Phase::Student,
            _ => Phase::Distill,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io { .. } | CoreError::Format { .. } => EXIT_IO,
                CoreError::Checkpoint(_) => EXIT_MODEL,
                CoreError::Config(_) | CoreError::Usage(_) | CoreError::Domain(_) => EXIT_CONFIG,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Single-threaded execution is the only mode; the variable is validated
/// and recorded so runs stay comparable.
fn worker_threads() -> anyhow::Result<usize> {
    match std::env::var("HKD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CoreError::Config(format!("HKD_THREADS must be a positive integer, got {v:?}")).into()),
        Err(_) => Ok(1),
    }
}

fn load_config(cmd: &Command) -> anyhow::Result<TrainConfig> {
    let common = cmd.common();
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    cfg.phase = cmd.phase();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Command::Distill { fa, .. } = cmd {
        if let Some(kind) = fa.fa_loss {
            cfg.fa.kind = kind;
        }
        if let Some(w) = fa.w_fa {
            cfg.fa.w_fa = w;
        }
    }
    if let Command::SynthData { n, width, height, .. } = cmd {
        cfg.data.n = n.unwrap_or(cfg.data.n);
        cfg.data.width = width.unwrap_or(cfg.data.width);
        cfg.data.height = height.unwrap_or(cfg.data.height);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_manifest(out: &Path, cmd: &Command, cfg: &TrainConfig, threads: usize, started: u64) -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let text = format!(
        "# hkd run manifest\ncommand = {}\nargs = {}\nversion = {}\ncommit = {}\nthreads = {threads}\nconfig_hash = {}\nstarted_unix = {started}\nfinished_unix = {}\n\n[config]\n{}",
        cmd.name(),
        args.join(" "),
        env!("CARGO_PKG_VERSION"),
        option_env!("HKD_COMMIT").unwrap_or("unknown"),
        cfg.hash(),
        unix_now(),
        cfg.to_kv()
    );
    write(&out.join("manifest.txt"), text)
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    let started = unix_now();
    let threads = worker_threads()?;
    let cfg = load_config(cmd)?;
    let out = &cmd.common().out_dir;
    fs::create_dir_all(out).map_err(|e| CoreError::Io {
        path: out.clone(),
        source: e,
    })?;
    match cmd {
        Command::SynthData { .. } => synth(&cfg, out)?,
        Command::TrainTeacher { data, .. } => {
            let (train, val) = train_val(data)?;
            let trained = train_teacher(&cfg, &train, &val)?;
            save_teacher(out, &trained)?;
        }
        Command::TrainStudent { data, .. } => {
            let (train, val) = train_val(data)?;
            let trained = train_student(&cfg, &train, &val, None)?;
            save_student(out, &trained)?;
        }
        Command::Distill { data, teacher, .. } => {
            let (train, val) = train_val(data)?;
            let teacher = obtain_teacher(&cfg, teacher.as_deref(), &train, &val, out)?;
            let trained = train_student(&cfg, &train, &val, Some(&teacher))?;
            save_student(out, &trained)?;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            grid,
            ..
        } => eval(&cfg, checkpoint, data, *split, *grid, out)?,
        Command::Bench { runs, warmup, .. } => bench(&cfg, *runs, *warmup, out)?,
        Command::Ablate {
            data,
            teacher,
            baseline,
            ..
        } => ablate(&cfg, data, teacher.as_deref(), *baseline, out)?,
    }
    write_manifest(out, cmd, &cfg, threads, started)
}

fn synth(cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let index = build_desk_dataset(out, cfg.data.n, cfg.data.width, cfg.data.height, cfg.seed)?;
    println!(
        "wrote {} pairs: train {}, val {}, test {}",
        index.entries.len(),
        index.count(Split::Train),
        index.count(Split::Val),
        index.count(Split::Test)
    );
    Ok(())
}

fn train_val(data: &Path) -> anyhow::Result<(Vec<Sample>, Vec<Sample>)> {
    let index = DatasetIndex::load(data)?;
    Ok((index.load_samples(Split::Train)?, index.load_samples(Split::Val)?))
}

fn save_teacher(out: &Path, trained: &Trained<TeacherNet>) -> anyhow::Result<()> {
    save_params(trained.net.params(), out.join("teacher.hkd"))?;
    write(&out.join("teacher_history.csv"), history_csv(&trained.history))?;
    println!("teacher: best epoch {} after {} steps", trained.best_epoch, trained.steps());
    Ok(())
}

fn save_student(out: &Path, trained: &Trained<StudentNet>) -> anyhow::Result<()> {
    save_params(trained.net.params(), out.join("student.hkd"))?;
    write(&out.join("history.csv"), history_csv(&trained.history))?;
    println!("student: best epoch {} after {} steps", trained.best_epoch, trained.steps());
    Ok(())
}

fn load_teacher(cfg: &TrainConfig, path: &Path) -> anyhow::Result<TeacherNet> {
    let params = load_params(path)?;
    Ok(TeacherNet::from_params(cfg.teacher, params)
        .with_context(|| format!("teacher checkpoint {}", path.display()))?
        .freeze())
}

fn obtain_teacher(
    cfg: &TrainConfig,
    given: Option<&Path>,
    train: &[Sample],
    val: &[Sample],
    out: &Path,
) -> anyhow::Result<TeacherNet> {
    match given {
        Some(path) => load_teacher(cfg, path),
        None => {
            let mut tcfg = cfg.clone();
            tcfg.phase = Phase::Teacher;
            let trained = train_teacher(&tcfg, train, val)?;
            save_teacher(out, &trained)?;
            Ok(trained.net.freeze())
        }
    }
}

fn eval(cfg: &TrainConfig, checkpoint: &Path, data: &Path, split: Split, columns: usize, out: &Path) -> anyhow::Result<()> {
    let params = load_params(checkpoint)?;
    let net = StudentNet::from_params(cfg.student.clone(), params)
        .with_context(|| format!("student checkpoint {}", checkpoint.display()))?;
    let samples = DatasetIndex::load(data)?.load_samples(split)?;
    if samples.is_empty() {
        return Err(CoreError::Config(format!("split {split} is empty")).into());
    }
    let (_, report) = evaluate_student(&net, &samples)?;
    write(&out.join("eval.csv"), report.to_csv())?;
    let shown = &samples[..columns.clamp(1, samples.len())];
    let dehazed = shown.iter().map(|s| net.dehaze(&s.hazy)).collect::<hkd_core::Result<Vec<_>>>()?;
    let grid = image_grid(shown, &dehazed)?;
    save_image(&grid, out.join("grid.png"))?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &QualityReport) {
    println!("{} images: PSNR {:.4} dB, SSIM {:.4}", report.per_image.len(), report.psnr_db, report.ssim);
}

/// Rows: hazy input, dehazed output, clear ground truth; white gutters.
fn image_grid(samples: &[Sample], dehazed: &[ImageRGB]) -> anyhow::Result<ImageRGB> {
    let (w, h) = (samples[0].clear.width(), samples[0].clear.height());
    let n = samples.len();
    let width = n * w + (n - 1) * GUTTER;
    let height = 3 * h + 2 * GUTTER;
    Ok(ImageRGB::from_fn(width, height, |y, x| {
        let (row, ry) = (y / (h + GUTTER), y % (h + GUTTER));
        let (col, cx) = (x / (w + GUTTER), x % (w + GUTTER));
        if ry >= h || cx >= w {
            return [1.0; 3];
        }
        let img = match row {
            0 => &samples[col].hazy,
            1 => &dehazed[col],
            _ => &samples[col].clear,
        };
        [0, 1, 2].map(|c| img.get(ry, cx, c))
    })?)
}

fn bench(cfg: &TrainConfig, runs: usize, warmup: usize, out: &Path) -> anyhow::Result<()> {
    let input = [1, 3, cfg.data.height, cfg.data.width];
    let student = StudentNet::new(cfg.student.clone(), cfg.seed)?;
    let teacher = TeacherNet::new(cfg.teacher, cfg.seed)?;
    let x = bench_input(input);
    let student_latency = time_inference(|| student.infer(&x).map(drop), runs, warmup)?;
    let lr_input = [1, 3, cfg.data.height / cfg.teacher.scale, cfg.data.width / cfg.teacher.scale];
    let xl = bench_input(lr_input);
    let teacher_latency = time_inference(|| teacher.infer(&xl).map(drop), runs, warmup)?;
    let reports = [
        ComputeReport {
            name: "student".into(),
            params: student.param_count(),
            gflops: estimate_flops(student.arch(), input)?,
            latency: student_latency,
            input,
        },
        ComputeReport {
            name: "teacher".into(),
            params: teacher.param_count(),
            gflops: estimate_flops(teacher.arch(), lr_input)?,
            latency: teacher_latency,
            input: lr_input,
        },
    ];
    write(&out.join("bench.md"), ComputeReport::markdown(&reports))?;
    write(&out.join("bench.csv"), ComputeReport::csv(&reports))?;
    print!("{}", ComputeReport::markdown(&reports));
    Ok(())
}

/// A fixed mid-grey ramp; latency does not depend on pixel values.
fn bench_input(shape: [usize; 4]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_fn(shape.to_vec(), |i| 0.25 + 0.5 * i as f32 / n as f32)
}

fn ablate(cfg: &TrainConfig, data: &Path, teacher: Option<&Path>, baseline: bool, out: &Path) -> anyhow::Result<()> {
    let index = DatasetIndex::load(data)?;
    let train = index.load_samples(Split::Train)?;
    let val = index.load_samples(Split::Val)?;
    let test = index.load_samples(Split::Test)?;
    if test.is_empty() {
        return Err(anyhow!(CoreError::Config("ablation needs a non-empty test split".into())));
    }
    let teacher = obtain_teacher(cfg, teacher, &train, &val, out)?;
    let rows = ablation::run(cfg, &ablation::grid(), &train, &val, &test, &teacher, |row| {
        match &row.outcome {
            Ok((p, s)) => println!("{}: PSNR {p:.4} SSIM {s:.4}", row.cell.label()),
            Err(e) => println!("{}: failed: {e}", row.cell.label()),
        }
    });
    write(&out.join("ablation.csv"), ablation::csv(&rows))?;
    write(&out.join("ablation.md"), ablation::markdown(&rows))?;
    if baseline {
        let mut scfg = cfg.clone();
        scfg.phase = Phase::Student;
        let trained = train_student(&scfg, &train, &val, None)?;
        let (_, q) = evaluate_student(&trained.net, &test)?;
        write(
            &out.join("baseline.csv"),
            format!("config_hash,psnr,ssim\n{},{:.6},{:.6}\n", scfg.hash(), q.psnr_db, q.ssim),
        )?;
        println!("student only: PSNR {:.4} SSIM {:.4}", q.psnr_db, q.ssim);
    }
    Ok(())
}
