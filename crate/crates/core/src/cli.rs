//! `dicl` command line: `train`, `eval`, `infer`, `ablate`, `bench`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselinecosts::CostHeadKind;
use crate::bench::{self, dpeak_histogram, dump_dap_kernels, scheme_csv, scheme_table, HistogramSpec, SchemeKind};
use crate::checkpoint::Checkpoint;
use crate::config::{ImageSize, Precision, RunConfig};
use crate::diclcost::MatchingNet;
use crate::diffcore::ParamStore;
use crate::error::{DiclError, Result};
use crate::flowdata::{evaluate, flow_to_color, gen_translation, load_image, write_flo, EvalResult, FlowSample};
use crate::flowhead::FlowField;
use crate::pyramidflow::FlowNet;
use crate::scalar::Scalar;
use crate::train::{evaluate_model, train, TrainReport};

#[derive(Parser, Debug)]
#[command(name = "dicl", version, about = "Displacement-invariant cost learning for optical flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model on synthetic pairs; writes loss/eval CSVs and checkpoints.
    Train(Common),
    /// Score a checkpoint (or a reference predictor) on synthetic pairs.
    Eval(EvalArgs),
    /// Estimate flow between two PNG frames.
    Infer(InferArgs),
    /// Train every cost head with the same seed and budget.
    Ablate(Common),
    /// Per-layer parameter and memory accounting of cost-volume schemes.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dap: Option<OnOff>,
    /// dot | cosine | mlp3 | reduced-dicl | dicl
    #[arg(long)]
    pub head: Option<CostHeadKind>,
    /// Training size, `HxW`.
    #[arg(long)]
    pub size: Option<ImageSize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<Precision>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.to_string_lossy().into_owned();
        }
        if let Some(v) = self.dap {
            cfg.dap = v == OnOff::On;
        }
        if let Some(v) = self.head {
            cfg.head = v;
        }
        if let Some(v) = self.size {
            cfg.size = v;
        }
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    /// The checkpoint given by `--checkpoint`.
    Model,
    /// Always zero flow.
    Zero,
    /// Returns the ground truth.
    Oracle,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: Predictor,
    /// Number of samples; defaults to the config's held-out count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Use constant-translation pairs `U,V` instead of the config's sample kinds.
    #[arg(long, value_parser = parse_pair)]
    pub translate: Option<(f64, f64)>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub img1: PathBuf,
    pub img2: PathBuf,
    /// Writes `<out>.flo` and `<out>_color.png`.
    #[arg(long, default_value = "flow")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub k: u64,
    #[arg(long, default_value_t = 7)]
    pub u: u64,
    #[arg(long, default_value_t = 7)]
    pub v: u64,
    #[arg(long, default_value_t = 64)]
    pub h: u64,
    #[arg(long, default_value_t = 96)]
    pub w: u64,
    /// Report a single scheme: conv4d | vcn_separable | dicl.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Also dump the finest DAP kernels and the held-out d_peak histogram of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected U,V, got '{s}'"))?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("bad number '{x}': {e}"));
    Ok((p(a)?, p(b)?))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
        _ => DiclError::Config(
            e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string(),
        ),
    })?;
    execute(cli.command)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg).map(drop),
                Precision::F64 => cmd_train::<f64>(&cfg).map(drop),
            }
        }
        Command::Ablate(c) => {
            let cfg = c.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_ablate::<f32>(&cfg).map(drop),
                Precision::F64 => cmd_ablate::<f64>(&cfg).map(drop),
            }
        }
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Infer(a) => cmd_infer(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in losses {
        let _ = writeln!(out, "{s},{l:?}");
    }
    out
}

fn eval_csv(evals: &[(usize, f64)]) -> String {
    let mut out = String::from("step,epe\n");
    for (s, e) in evals {
        let _ = writeln!(out, "{s},{e:?}");
    }
    out
}

/// Trains `cfg`'s model, writing `loss.csv`, `eval.csv`, `config.toml`, `final.ckpt` and `best.ckpt`.
/// On divergence `last_good.ckpt` is written and the error returned.
pub fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<TrainReport<T>> {
    let dir = out_dir(cfg)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut model = FlowNet::<T>::new(cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut losses = Vec::new();
    let report = match train(&mut model, &cfg.train_config(), |s, l| losses.push((s, l))) {
        Ok(r) => r,
        Err((e, last_good)) => {
            fs::write(dir.join("loss.csv"), loss_csv(&losses))?;
            Checkpoint::new(cfg, &last_good).save(dir.join("last_good.ckpt"))?;
            return Err(e);
        }
    };
    fs::write(dir.join("loss.csv"), loss_csv(&report.losses))?;
    fs::write(dir.join("eval.csv"), eval_csv(&report.evals))?;
    Checkpoint::new(cfg, &model.store).save(dir.join("final.ckpt"))?;
    if let Some((_, _, best)) = &report.best {
        Checkpoint::new(cfg, best).save(dir.join("best.ckpt"))?;
    }
    if let Some((step, epe)) = report.evals.last() {
        println!("trained {} ({}) for {step} steps: held-out EPE {epe:.4}", cfg.head, dap_label(cfg.dap));
    }
    Ok(report)
}

fn dap_label(dap: bool) -> &'static str {
    if dap {
        "dap on"
    } else {
        "dap off"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub head: CostHeadKind,
    /// `None` when training diverged.
    pub result: Option<(f64, f64)>,
    pub detail: String,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("head,epe,fl_all,status\n");
    for r in rows {
        match r.result {
            Some((epe, fl)) => {
                let _ = writeln!(out, "{},{epe:?},{fl:?},ok", r.head);
            }
            None => {
                let _ = writeln!(out, "{},NaN,NaN,{}", r.head, r.detail.replace(',', ";"));
            }
        }
    }
    out
}

/// Trains every head on the same seed and budget and writes `ablation.csv`.
pub fn cmd_ablate<T: Scalar>(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let dir = out_dir(cfg)?;
    let tc = cfg.train_config();
    let heldout = tc.heldout::<T>()?;
    let mut rows = Vec::new();
    for head in CostHeadKind::ALL {
        let mc = RunConfig { head, ..cfg.clone() }.model_config();
        let mut model = FlowNet::<T>::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let row = match train(&mut model, &tc, |_, _| {}) {
            Ok(_) => {
                let r = evaluate_model(&model, &heldout)?;
                AblationRow { head, result: Some((r.epe, r.fl_all)), detail: String::new() }
            }
            Err((e, _)) => AblationRow { head, result: None, detail: e.to_string() },
        };
        match row.result {
            Some((epe, _)) => println!("{head:>12}  EPE {epe:.4}"),
            None => println!("{head:>12}  {}", row.detail),
        }
        rows.push(row);
    }
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

fn eval_samples(a: &EvalArgs, cfg: &RunConfig) -> Result<Vec<FlowSample<f64>>> {
    let n = a.samples.unwrap_or(cfg.eval_count);
    let size = (cfg.size.height, cfg.size.width);
    match a.translate {
        Some(t) => (0..n).map(|i| gen_translation(cfg.seed.wrapping_add(i as u64), size, t)).collect(),
        None => {
            let tc = crate::train::TrainConfig { eval_count: n, ..cfg.train_config() };
            tc.heldout()
        }
    }
}

/// Per-sample and mean scores, written to `eval.csv` in the output directory.
pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<EvalResult>> {
    let ck = match (&a.checkpoint, a.predictor) {
        (Some(p), _) => Some(Checkpoint::load(p)?),
        (None, Predictor::Model) => {
            return Err(DiclError::Config("eval needs --checkpoint for the model predictor".into()))
        }
        (None, _) => None,
    };
    let base = match (&ck, &a.common.config) {
        (Some(ck), None) => ck.config.clone(),
        _ => a.common.resolve()?,
    };
    let cfg = apply_overrides(base, &a.common)?;
    let samples = eval_samples(a, &cfg)?;
    if samples.is_empty() {
        return Err(DiclError::Empty("no evaluation samples".into()));
    }
    let precision =
        ck.as_ref().map_or(cfg.precision, |c| if c.dtype == "f32" { Precision::F32 } else { Precision::F64 });
    let (results, dpeak) = match (a.predictor, precision) {
        (Predictor::Zero, _) => (fixed(&samples, |s| s.gt_flow.map(|_| 0.0))?, None),
        (Predictor::Oracle, _) => (fixed(&samples, |s| s.gt_flow.clone())?, None),
        (Predictor::Model, Precision::F32) => model_eval::<f32>(ck.as_ref().expect("checked"), &samples)?,
        (Predictor::Model, Precision::F64) => model_eval::<f64>(ck.as_ref().expect("checked"), &samples)?,
    };
    let n = results.len() as f64;
    let mean_epe = results.iter().map(|r| r.epe).sum::<f64>() / n;
    let mean_fl = results.iter().map(|r| r.fl_all).sum::<f64>() / n;
    let mut csv = String::from("sample,epe,fl_all\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:?},{:?}", r.epe, r.fl_all);
        println!("sample {i:>3}  EPE {:.4}  Fl-all {:.4}", r.epe, r.fl_all);
    }
    let _ = writeln!(csv, "mean,{mean_epe:?},{mean_fl:?}");
    println!("mean        EPE {mean_epe:.4}  Fl-all {mean_fl:.4}");
    if let Some(d) = dpeak {
        println!("median d_peak {:.4}", bench::median(&d)?);
    }
    let dir = out_dir(&cfg)?;
    fs::write(dir.join("eval.csv"), csv)?;
    Ok(results)
}

fn apply_overrides(mut cfg: RunConfig, c: &Common) -> Result<RunConfig> {
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out_dir {
        cfg.out_dir = v.to_string_lossy().into_owned();
    }
    if let Some(v) = c.size {
        cfg.size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fixed(
    samples: &[FlowSample<f64>],
    pred: impl Fn(&FlowSample<f64>) -> crate::diffcore::Tensor<f64>,
) -> Result<Vec<EvalResult>> {
    samples.iter().map(|s| evaluate(&pred(s), &s.gt_flow, &s.valid)).collect()
}

type ModelScores = (Vec<EvalResult>, Option<Vec<f64>>);

fn model_eval<T: Scalar>(ck: &Checkpoint, samples: &[FlowSample<f64>]) -> Result<ModelScores> {
    let model: FlowNet<T> = ck.into_model()?;
    let cast: Vec<FlowSample<T>> = samples.iter().map(FlowSample::cast).collect();
    let r = evaluate_model(&model, &cast)?;
    Ok((r.per_sample, Some(r.dpeak)))
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let flow = if ck.dtype == "f32" { infer_with::<f32>(&ck, a)? } else { infer_with::<f64>(&ck, a)? };
    let flo = with_suffix(&a.out, ".flo");
    let png = with_suffix(&a.out, "_color.png");
    if let Some(parent) = flo.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_flo(&flo, &flow)?;
    flow_to_color(&flow, None).save(&png)?;
    println!("wrote {} and {}", flo.display(), png.display());
    Ok(())
}

fn infer_with<T: Scalar>(ck: &Checkpoint, a: &InferArgs) -> Result<FlowField<f64>> {
    let model: FlowNet<T> = ck.into_model()?;
    let img1 = load_image::<T>(&a.img1)?;
    let img2 = load_image::<T>(&a.img2)?;
    if img1.shape() != img2.shape() {
        return Err(DiclError::Invalid(format!("image sizes differ: {:?} vs {:?}", img1.shape(), img2.shape())));
    }
    let f = model.predict(&img1, &img2)?;
    FlowField::new(f.flow.cast())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let mut rows = scheme_table(a.k, a.u, a.v, a.h, a.w)?;
    if let Some(s) = &a.scheme {
        let kind: SchemeKind = s.parse()?;
        rows.retain(|r| r.kind == kind);
    }
    fs::create_dir_all(&a.out_dir)?;
    let csv = scheme_csv(&rows);
    print!("{csv}");
    fs::write(a.out_dir.join("schemes.csv"), csv)?;

    let mut store = ParamStore::<f32>::new();
    let net = MatchingNet::new(&mut store, "probe", &mut ChaCha8Rng::seed_from_u64(0));
    let (h, w) = (a.h as usize, a.w as usize);
    match bench::probe_matching_memory(&net, &store, h, w) {
        Ok(p) => println!("live matching-net peak for one hypothesis at {h}x{w}: {p} elements"),
        Err(e) => println!("live probe skipped: {e}"),
    }

    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let model: FlowNet<f64> = ck.into_model()?;
        let dap = model.dap.first().ok_or_else(|| DiclError::Invalid("checkpoint has no DAP layers".into()))?;
        dump_dap_kernels(&dap.matrix(&model.store), a.out_dir.join("dap_kernels"))?;
        let r = evaluate_model(&model, &ck.config.train_config().heldout()?)?;
        let hist = dpeak_histogram(&r.dpeak, HistogramSpec::default())?;
        fs::write(a.out_dir.join("dpeak_hist.csv"), hist.to_csv())?;
        println!("median d_peak {:.4} over {} pixels", hist.median, r.dpeak.len());
    }
    Ok(())
}
