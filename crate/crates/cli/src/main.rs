use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bmoe::analysis::{
    ablation_table, evaluate, expert_importance_heatmap, expert_masks, prepare_all, run_ablation_masking,
    run_ablation_retrain, stream_masks, AblationMode, AblationRow,
};
use bmoe::data::{class_histogram, save_dataset, save_sidecar, DatasetConfig};
use bmoe::encoders::RegionId;
use bmoe::experiment::ExperimentConfig;
use bmoe::gradcheck::{run_gradcheck, GradcheckConfig};
use bmoe::model::{AblationMask, BMoEModel, PreparedSample};
use bmoe::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use bmoe::train::{pretrain_expert, train_end_to_end, EpochRecord};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bmoe", version, about = "Body-part mixture-of-experts experiments on synthetic clips")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out datasets.
    GenData,
    /// Pretrain region experts on their own classes.
    Pretrain {
        /// Comma-separated regions; all four when omitted.
        #[arg(long, value_delimiter = ',')]
        regions: Vec<String>,
    },
    /// Train the full model end to end.
    Train {
        /// Directory of expert checkpoints written by `pretrain`.
        #[arg(long)]
        from_pretrained: Option<PathBuf>,
    },
    /// Score a trained model.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Stream and expert ablations.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the configured ablation mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Mean fusion weight per class and expert, as CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every block on a toy model.
    Gradcheck {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        clip_length: Option<usize>,
        #[arg(long)]
        max_params: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Masking,
    Retrain,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

struct Session {
    cfg: ExperimentConfig,
    data: DatasetConfig,
    out: PathBuf,
}

impl Session {
    fn open(g: &Global) -> Result<Self> {
        let cfg = load_config(g)?;
        let data = cfg.dataset_config()?;
        cfg.write_snapshot()?;
        Ok(Self {
            out: cfg.output_dir.clone(),
            cfg,
            data,
        })
    }

    fn model(&self) -> Result<BMoEModel<f32>> {
        Ok(BMoEModel::new(self.cfg.model.clone(), self.data.class_region_map(), self.data.channels)?)
    }

    fn prepared(&self, model: &BMoEModel<f32>, split: Split) -> Result<Vec<PreparedSample<f32>>> {
        let samples = match split {
            Split::Train => self.cfg.train_samples()?,
            Split::Test => self.cfg.test_samples()?,
        };
        Ok(prepare_all(model, &samples)?)
    }

    fn trained(&self, checkpoint: Option<&Path>) -> Result<BMoEModel<f32>> {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.out.join("model.bmo"));
        let mut model = self.model()?;
        load_checkpoint(&mut model.store, &path).with_context(|| format!("loading {}", path.display()))?;
        Ok(model)
    }
}

fn print_histogram(data: &DatasetConfig, hist: &[usize]) {
    println!("class histogram ({} samples)", hist.iter().sum::<usize>());
    for (c, n) in hist.iter().enumerate() {
        println!("  {c:>3} {:<24} {n}", data.classes[c].display_name());
    }
}

fn cmd_gen_data(g: &Global) -> Result<()> {
    let s = Session::open(g)?;
    let train = s.cfg.train_samples()?;
    let test = s.cfg.test_samples()?;
    let mut test_cfg = s.data.clone();
    test_cfg.seed = test_cfg.seed.wrapping_add(1);
    for (name, samples, cfg) in [("train.bmds", &train, &s.data), ("test.bmds", &test, &test_cfg)] {
        let path = s.out.join(name);
        save_dataset(samples, &path)?;
        save_sidecar(cfg, &path)?;
        println!("wrote {} ({} samples)", path.display(), samples.len());
    }
    print_histogram(&s.data, &class_histogram(&train, s.data.num_classes()));
    Ok(())
}

fn param_subset(store: &ParamStore<f32>, prefixes: &[String]) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p.as_str()))) {
        out.add(name, t.clone())?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct PretrainLine<'a> {
    region: RegionId,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

fn cmd_pretrain(g: &Global, regions: &[String]) -> Result<()> {
    let s = Session::open(g)?;
    let regions: Vec<RegionId> = if regions.is_empty() {
        RegionId::ALL.to_vec()
    } else {
        regions.iter().map(|r| r.parse()).collect::<bmoe::Result<_>>()?
    };
    let map = s.data.class_region_map();
    if let Some(r) = regions.iter().find(|r| !map.contains(r)) {
        bail!("region {r} has no classes to pretrain on");
    }
    let mut model = s.model()?;
    let data = s.prepared(&model, Split::Train)?;
    let emb = s.cfg.label_embeddings(&s.data)?;
    let dir = s.out.join("pretrain");
    std::fs::create_dir_all(&dir)?;
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for r in regions {
        let (report, _) = pretrain_expert(&mut model, &data, r, &emb, &s.cfg.train)?;
        let ckpt = param_subset(&model.store, &["semantic.".into(), format!("expert.{r}.")])?;
        let path = dir.join(format!("{r}.bmo"));
        save_checkpoint(&ckpt, &path)?;
        let last = report.log.last().map(|e| e.loss).unwrap_or(f64::NAN);
        println!("{r}: {} classes, {} samples, final loss {last:.4}, wrote {}", report.classes.len(), report.samples, path.display());
        reports.push(report);
    }
    for rep in &reports {
        lines.extend(rep.log.iter().map(|record| PretrainLine { region: rep.region, record }));
    }
    write_jsonl(&dir.join("pretrain_log.jsonl"), &lines)?;
    Ok(())
}

/// Loads pretrained experts in region order; the shared semantic encoder
/// comes from the last checkpoint, which saw every earlier stage.
fn load_pretrained(model: &mut BMoEModel<f32>, dir: &Path) -> Result<()> {
    let map = model.class_region_map.clone();
    let mut last = None;
    for r in RegionId::ALL.into_iter().filter(|r| map.contains(r)) {
        let path = dir.join(format!("{r}.bmo"));
        if !path.exists() {
            bail!("missing pretrained checkpoint {}", path.display());
        }
        let loaded = bmoe::tensor::read_checkpoint::<f32, _>(File::open(&path)?)?;
        model.store.copy_from(&loaded, &format!("expert.{r}."))?;
        last = Some(loaded);
    }
    if let Some(l) = last {
        model.store.copy_from(&l, "semantic.")?;
    }
    Ok(())
}

fn cmd_train(g: &Global, from: Option<&Path>) -> Result<()> {
    let s = Session::open(g)?;
    let mut model = s.model()?;
    if let Some(dir) = from {
        load_pretrained(&mut model, dir)?;
    }
    let train = s.prepared(&model, Split::Train)?;
    let log = train_end_to_end(&mut model, &train, &AblationMask::all_on(), &s.cfg.train)?;
    write_jsonl(&s.out.join("train_log.jsonl"), &log)?;
    let path = s.out.join("model.bmo");
    save_checkpoint(&model.store, &path)?;
    let test = s.prepared(&model, Split::Test)?;
    let report = evaluate(&model, &test, &AblationMask::all_on())?.report;
    write_json(&s.out.join("metrics.json"), &report)?;
    println!("wrote {}", path.display());
    println!("top1 {:.4} f1_macro {:.4}", report.top1, report.f1_macro);
    Ok(())
}

fn cmd_eval(g: &Global, checkpoint: Option<&Path>, split: Split) -> Result<()> {
    let s = Session::open(g)?;
    let model = s.trained(checkpoint)?;
    let data = s.prepared(&model, split)?;
    let report = evaluate(&model, &data, &AblationMask::all_on())?.report;
    write_json(&s.out.join("eval.json"), &report)?;
    std::fs::write(s.out.join("confusion.csv"), report.confusion_csv())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_ablate(g: &Global, checkpoint: Option<&Path>, mode: Option<Mode>) -> Result<()> {
    let s = Session::open(g)?;
    let mode = match mode {
        Some(Mode::Masking) => AblationMode::Masking,
        Some(Mode::Retrain) => AblationMode::Retrain,
        None => s.cfg.ablation_mode,
    };
    let run = |masks: &[AblationMask]| -> Result<Vec<AblationRow>> {
        match mode {
            AblationMode::Masking => {
                let model = s.trained(checkpoint)?;
                let test = s.prepared(&model, Split::Test)?;
                Ok(run_ablation_masking(&model, &test, masks)?)
            }
            AblationMode::Retrain => {
                let model = s.model()?;
                let train = s.prepared(&model, Split::Train)?;
                let test = s.prepared(&model, Split::Test)?;
                let emb = s.cfg.label_embeddings(&s.data)?;
                Ok(run_ablation_retrain(
                    &s.cfg.model,
                    &s.data.class_region_map(),
                    s.data.channels,
                    &train,
                    &test,
                    masks,
                    &s.cfg.train,
                    Some(&emb),
                )?)
            }
        }
    };
    for (name, masks) in [("streams", stream_masks()), ("experts", expert_masks())] {
        let rows = run(&masks)?;
        let table = ablation_table(&rows);
        std::fs::write(s.out.join(format!("ablation_{name}.csv")), &table)?;
        write_json(&s.out.join(format!("ablation_{name}.json")), &rows)?;
        print!("{table}");
    }
    Ok(())
}

fn cmd_heatmap(g: &Global, checkpoint: Option<&Path>) -> Result<()> {
    let s = Session::open(g)?;
    let model = s.trained(checkpoint)?;
    let data = s.prepared(&model, Split::Test)?;
    let eval = evaluate(&model, &data, &AblationMask::all_on())?;
    let labels: Vec<usize> = data.iter().map(|x| x.label).collect();
    let map = expert_importance_heatmap(&eval.inferences, &labels, model.num_classes)?;
    let csv = map.to_csv(&s.data.class_names());
    std::fs::write(s.out.join("heatmap.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(g: &Global, dim: Option<usize>, clip_length: Option<usize>, max_params: Option<usize>) -> Result<bool> {
    let mut cfg = GradcheckConfig::default();
    if let Some(d) = dim {
        cfg.dim = d;
    }
    if let Some(t) = clip_length {
        cfg.clip_length = t;
    }
    if let Some(m) = max_params {
        cfg.max_params = m;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let report = run_gradcheck(&cfg)?;
    println!("model parameters {}", report.model_params);
    for b in &report.blocks {
        println!(
            "{:<12} {:>6} params {:>6} coords  max rel err {:.3e}  {}",
            b.name,
            b.params,
            b.coordinates,
            b.max_rel_error,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{}", if report.passed { "all blocks pass" } else { "gradient check failed" });
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    Ok(report.passed)
}

fn run(cli: &Cli) -> Result<bool> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => cmd_gen_data(g)?,
        Command::Pretrain { regions } => cmd_pretrain(g, regions)?,
        Command::Train { from_pretrained } => cmd_train(g, from_pretrained.as_deref())?,
        Command::Eval { checkpoint, split } => cmd_eval(g, checkpoint.as_deref(), *split)?,
        Command::Ablate { checkpoint, mode } => cmd_ablate(g, checkpoint.as_deref(), *mode)?,
        Command::Heatmap { checkpoint } => cmd_heatmap(g, checkpoint.as_deref())?,
        Command::Gradcheck {
            dim,
            clip_length,
            max_params,
        } => return cmd_gradcheck(g, *dim, *clip_length, *max_params),
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .filter_map(|e| e.downcast_ref::<bmoe::Error>())
        .any(|e| matches!(e, bmoe::Error::Validation(_) | bmoe::Error::Json(_)));
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
