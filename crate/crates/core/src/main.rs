use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use matchattn::checkpoint::{load_checkpoint, save_checkpoint};
use matchattn::config::RunConfig;
use matchattn::decoder::{reference_view, stack_views, DecoderConfig, Task};
use matchattn::harness::bench::{run_bench, stage_times, Variant};
use matchattn::harness::checks::{self, Check};
use matchattn::harness::flops::{decoder_flops, flops_count, FlopsBreakdown};
use matchattn::harness::io::{read_flo, read_pfm, read_pnm, write_flo, write_pfm, write_pnm};
use matchattn::harness::metrics::{compute_metrics, disparity_to_field};
use matchattn::harness::scene::{gen_scene, SceneKind, SceneParams};
use matchattn::train::{predict, train_toy, write_trace, Sample};
use matchattn::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "matchattn", version, about = "MatchAttention stereo and flow toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite.
    Selftest(OutArg),
    /// Finite-difference gradient sweeps.
    Gradcheck {
        /// Check every n-th entry of the encoder stem kernel.
        #[arg(long, default_value_t = 7)]
        stride: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Latency scaling of MatchAttention against the baselines.
    Bench(BenchArgs),
    /// Closed-form FLOPs of one layer or a whole preset.
    Flops(FlopsArgs),
    /// Write a synthetic scene: images, ground truth and masks.
    Gen(GenArgs),
    /// Overfit the decoder on a synthetic scene.
    TrainToy(TrainArgs),
    /// Predict from a checkpoint and an image pair.
    Infer(InferArgs),
    /// Compare a prediction file with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct OutArg {
    /// Directory for CSV mirrors of the printed output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Match,
    Global,
    Direct,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square token extents for MatchAttention and direct sampling.
    #[arg(long, value_delimiter = ',')]
    sides: Option<Vec<usize>>,
    /// Square token extents for global attention (at most 128).
    #[arg(long, value_delimiter = ',')]
    global_sides: Option<Vec<usize>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Worker threads; timing is single-threaded unless set.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "match,global,direct")]
    variants: Vec<VariantArg>,
    #[command(flatten)]
    out: OutArg,
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Match => Variant::Match,
        VariantArg::Global => Variant::Global,
        VariantArg::Direct => Variant::Direct,
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Stereo,
    Flow,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Stereo => Task::Stereo,
            TaskArg::Flow => Task::Flow,
        }
    }
}

#[derive(Args)]
struct FlopsArgs {
    /// Whole-model count for a preset (desk, T, S, B).
    #[arg(long, conflicts_with = "layer")]
    preset: Option<String>,
    /// Square input resolution for `--preset`.
    #[arg(long, default_value_t = 1536)]
    res: u64,
    #[arg(long, value_enum, default_value = "stereo")]
    task: TaskArg,
    /// Single layer: H W heads c_k c_v w.
    #[arg(long, num_args = 6, value_names = ["H", "W", "HEADS", "CK", "CV", "WIN"])]
    layer: Option<Vec<u64>>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    ConstantShift,
    TwoLayer,
    SmoothWarp,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "constant-shift")]
    kind: KindArg,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    fg_shift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference image (binary PPM).
    #[arg(long)]
    left: PathBuf,
    /// Target image (binary PPM).
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction: disparity `.pfm` or flow `.flo`.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth in the same format.
    #[arg(long)]
    gt: PathBuf,
    /// Optional non-occlusion mask (PGM, nonzero = visible).
    #[arg(long)]
    noc: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Selftest(o) => selftest(o.out.as_deref()),
        Command::Gradcheck { stride, out } => gradcheck(stride, out.out.as_deref()),
        Command::Bench(a) => bench(a),
        Command::Flops(a) => flops(a),
        Command::Gen(a) => gen(a),
        Command::TrainToy(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report(checks: &[Check], out: Option<&Path>, file: &str) -> Result<Outcome> {
    for c in checks {
        println!("{c}");
    }
    if let Some(dir) = out {
        out_dir(dir)?;
        let mut s = String::from("check,passed,detail\n");
        for c in checks {
            s.push_str(&format!("\"{}\",{},\"{}\"\n", c.name, c.passed, c.detail.replace('"', "'")));
        }
        write_text(&dir.join(file), &s)?;
    }
    Ok(if checks.iter().all(|c| c.passed) { Outcome::Ok } else { Outcome::Failed })
}

fn selftest(out: Option<&Path>) -> Result<Outcome> {
    let checks = vec![
        checks::bsm_oracle(200, 1)?,
        checks::reductions(2)?,
        checks::decoder_normalization(Task::Stereo, 64, 128, 3)?,
        checks::decoder_normalization(Task::Flow, 64, 64, 4)?,
        checks::flops_formulas(),
        checks::io_round_trips(20, 5)?,
        checks::scene_consistency(6)?,
        checks::metrics_double_entry(7)?,
        checks::grad_bsm(8)?,
    ];
    report(&checks, out, "selftest.csv")
}

fn gradcheck(stride: usize, out: Option<&Path>) -> Result<Outcome> {
    let checks = vec![checks::grad_bsm(11)?, checks::grad_layer(12)?, checks::grad_decoder(13, stride)?];
    report(&checks, out, "gradcheck.csv")
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed()?;
    let mut b = cfg.bench;
    if let Some(s) = a.sides {
        b.sides = s;
    }
    if let Some(s) = a.global_sides {
        b.global_sides = s;
    }
    b.runs = a.runs.unwrap_or(b.runs);
    b.channels = a.channels.unwrap_or(b.channels);
    b.window = a.window.unwrap_or(b.window);
    b.threads = a.threads.unwrap_or(b.threads);
    if !b.sides.windows(2).all(|w| w[0] < w[1]) || !b.global_sides.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("sizes must be ascending".into()));
    }
    let variants: Vec<Variant> = a.variants.iter().map(|&v| variant(v)).collect();
    let rep = run_bench(&b, &variants)?;
    println!("{}", matchattn::harness::bench::CSV_HEADER);
    for r in &rep.rows {
        println!("{}", r.csv());
    }
    for v in &variants {
        if let Some(s) = rep.slope(*v) {
            println!("# {} log-log slope {s:.3}", v.name());
        }
    }
    if let Some(&side) = b.sides.last() {
        let (m, d) = stage_times(&b, side)?;
        println!("# similarity+aggregation at {side}x{side}: match {m:.2} ms, direct {d:.2} ms, ratio {:.2}", d / m);
    }
    if let Some(dir) = &a.out.out {
        out_dir(dir)?;
        rep.write_csv(&dir.join("bench.csv"))?;
        rep.write_memory_csv(&dir.join("bench_memory.csv"))?;
    }
    Ok(Outcome::Ok)
}

fn flops_lines(b: &FlopsBreakdown) -> Vec<(&'static str, u64)> {
    vec![
        ("qk_flops", b.qk_flops),
        ("bsm_flops", b.bsm_flops),
        ("agg_flops", b.agg_flops),
        ("attention_flops", b.attention_flops()),
        ("tensor_flops", b.tensor_flops),
        ("total_flops", b.total()),
        ("attn_memory", b.attn_memory),
    ]
}

fn flops(a: FlopsArgs) -> Result<Outcome> {
    let b = match (&a.layer, &a.preset) {
        (Some(l), _) => {
            if l.iter().any(|&v| v == 0) {
                return Err(Error::Config("layer extents must be positive".into()));
            }
            flops_count(l[0], l[1], l[2], l[3], l[4], l[5])
        }
        (None, p) => {
            let cfg = DecoderConfig::preset(p.as_deref().unwrap_or("T"), a.task.into())?;
            if a.res == 0 || a.res % 32 != 0 {
                return Err(Error::Config("--res must be a positive multiple of 32".into()));
            }
            let b = decoder_flops(&cfg, a.res, a.res);
            println!("# params-free attention share {:.2}%", 100.0 * b.attention_flops() as f64 / b.total() as f64);
            b
        }
    };
    let lines = flops_lines(&b);
    for (k, v) in &lines {
        println!("{k} {v} ({:.3e})", *v as f64);
    }
    if let Some(dir) = &a.out.out {
        out_dir(dir)?;
        let mut s = String::from("quantity,value\n");
        for (k, v) in &lines {
            s.push_str(&format!("{k},{v}\n"));
        }
        write_text(&dir.join("flops.csv"), &s)?;
    }
    Ok(Outcome::Ok)
}

fn channel(t: &Tensor, c: usize, scale: f64) -> Result<Tensor> {
    let n = t.last_dim();
    let data = t.data().chunks(n).map(|p| p[c] * scale).collect();
    Tensor::new(t.shape()[..t.rank() - 1].to_vec(), data)
}

fn gen(a: GenArgs) -> Result<Outcome> {
    let kind = match a.kind {
        KindArg::ConstantShift => SceneKind::ConstantShift,
        KindArg::TwoLayer => SceneKind::TwoLayer,
        KindArg::SmoothWarp => SceneKind::SmoothWarp,
    };
    let mut params = SceneParams::default();
    params.shift = a.shift.unwrap_or(params.shift);
    params.fg_shift = a.fg_shift.unwrap_or(params.fg_shift);
    let mut cfg = RunConfig::default();
    cfg.resolve_seed()?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let s = gen_scene(kind, a.height, a.width, &params, seed)?;
    out_dir(&a.out)?;
    write_pnm(&a.out.join("i0.ppm"), &s.i0)?;
    write_pnm(&a.out.join("i1.ppm"), &s.i1)?;
    write_pnm(&a.out.join("noc0.pgm"), &s.noc0)?;
    write_pnm(&a.out.join("noc1.pgm"), &s.noc1)?;
    if kind == SceneKind::SmoothWarp {
        write_flo(&a.out.join("gt0.flo"), &s.r0)?;
        write_flo(&a.out.join("gt1.flo"), &s.r1)?;
    } else {
        write_pfm(&a.out.join("gt0.pfm"), &channel(&s.r0, 0, -1.0)?)?;
        write_pfm(&a.out.join("gt1.pfm"), &channel(&s.r1, 0, 1.0)?)?;
    }
    println!("wrote {:?} scene {}x{} (seed {seed}) to {}", kind, a.height, a.width, a.out.display());
    Ok(Outcome::Ok)
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve_seed()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let dcfg = cfg.decoder()?;
    let sc = &cfg.scene;
    let scene = gen_scene(sc.kind, sc.height, sc.width, &sc.params, cfg.seed)?;
    let data = vec![Sample::from_scene(&scene)?];
    out_dir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = train_toy(&data, &cfg.train, &dcfg, None, |r| {
        if let Some(e) = r.epe {
            println!("step {} loss {:.4} noc-epe {e:.4}", r.step, r.loss);
        }
    })?;
    save_checkpoint(&a.out.join("model.mtck"), &outcome.store, &dcfg)?;
    let mut buf = Vec::new();
    write_trace(&outcome.trace, &mut buf).expect("writing to memory");
    write_text(&a.out.join("trace.csv"), std::str::from_utf8(&buf).expect("ascii trace"))?;
    println!("wrote model.mtck and trace.csv to {}", a.out.display());
    Ok(Outcome::Ok)
}

fn infer(a: InferArgs) -> Result<Outcome> {
    let (store, dcfg) = load_checkpoint(&a.checkpoint)?;
    let (i0, i1) = (read_pnm(&a.left)?, read_pnm(&a.right)?);
    if i0.rank() != 3 || i0.dim(0) % 32 != 0 || i0.dim(1) % 32 != 0 {
        return Err(Error::Config(format!("images must be colour with extents divisible by 32, got {:?}", i0.shape())));
    }
    let (r, sr) = predict(&store, &dcfg, &stack_views(&i0, &i1)?)?;
    let r0 = reference_view(&r)?;
    out_dir(&a.out)?;
    match dcfg.task {
        Task::Stereo => write_pfm(&a.out.join("pred.pfm"), &channel(&r0, 0, -1.0)?)?,
        Task::Flow => write_flo(&a.out.join("pred.flo"), &r0)?,
    }
    // Self relative positions of the reference view, one 2-channel field
    // per head.
    let (h, w) = (i0.dim(0), i0.dim(1));
    let s0 = &sr.data()[..h * w * 2 * dcfg.heads];
    let mut csv = String::from("x,y,rx,ry");
    for k in 0..dcfg.heads {
        csv.push_str(&format!(",srx{k},sry{k}"));
        let data = s0.chunks(2 * dcfg.heads).flat_map(|p| [p[2 * k], p[2 * k + 1]]).collect();
        write_flo(&a.out.join(format!("self_rpos_h{k}.flo")), &Tensor::new(vec![h, w, 2], data)?)?;
    }
    csv.push('\n');
    for p in 0..h * w {
        csv.push_str(&format!("{},{},{},{}", p % w, p / w, r0.data()[2 * p], r0.data()[2 * p + 1]));
        for v in &s0[p * 2 * dcfg.heads..(p + 1) * 2 * dcfg.heads] {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_text(&a.out.join("pred.csv"), &csv)?;
    println!("wrote prediction and {} self relative position fields to {}", dcfg.heads, a.out.display());
    Ok(Outcome::Ok)
}

fn read_field(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("flo") => read_flo(path),
        Some("pfm") => {
            let d = read_pfm(path)?;
            if d.rank() != 2 {
                return Err(Error::Config(format!("{} is not a single-channel disparity map", path.display())));
            }
            disparity_to_field(&d)
        }
        _ => Err(Error::Config(format!("{}: expected .pfm or .flo", path.display()))),
    }
}

fn eval(a: EvalArgs) -> Result<Outcome> {
    let pred = read_field(&a.pred)?;
    let gt = read_field(&a.gt)?;
    let noc = a.noc.as_deref().map(read_pnm).transpose()?;
    let rep = compute_metrics(&pred, &gt, None, noc.as_ref())?;
    let csv = rep.csv();
    print!("{csv}");
    if let Some(dir) = &a.out.out {
        out_dir(dir)?;
        write_text(&dir.join("metrics.csv"), &csv)?;
    }
    Ok(Outcome::Ok)
}
