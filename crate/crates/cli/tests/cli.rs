use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bmoe::data::{DatasetConfig, RegionLayout};
use bmoe::encoders::RegionId;
use bmoe::experiment::{DataSource, ExperimentConfig};
use bmoe::gradcheck::GradcheckConfig;
use bmoe::metrics::MetricsReport;
use bmoe::tensor::{read_checkpoint, ParamStore};
use bmoe::train::TrainConfig;

fn bmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmoe")).args(args).output().expect("run bmoe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let cfg = ExperimentConfig {
        data: DataSource::Inline(DatasetConfig {
            samples_per_class: 4,
            region_layout: RegionLayout::Fixed,
            ..DatasetConfig::separable(0)
        }),
        model: GradcheckConfig::default().model(),
        train: TrainConfig {
            epochs: 2,
            pretrain_epochs: 1,
            embed_dim: 16,
            learning_rate: 0.005,
            ..TrainConfig::default()
        },
        output_dir: dir.join("out"),
        ..ExperimentConfig::default()
    };
    let mut cfg = cfg;
    cfg.set_seed(3);
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("experiment.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    let out = cfg.output_dir.clone();
    (dir, path, out)
}

fn load(path: &Path) -> ParamStore<f32> {
    read_checkpoint(std::fs::File::open(path).unwrap()).unwrap()
}

fn bits(store: &ParamStore<f32>, prefix: &str) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn gen_data_writes_files_and_histogram() {
    let (_d, cfg, out) = setup();
    let o = bmoe(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success(), "{o:?}");
    for f in ["train.bmds", "train.bmds.json", "test.bmds", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let text = stdout(&o);
    assert!(text.contains("class histogram (32 samples)"), "{text}");
    let counts: usize = text
        .lines()
        .filter(|l| l.starts_with("  "))
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 32);
}

#[test]
fn gen_data_is_reproducible() {
    let (d, cfg, out) = setup();
    assert!(bmoe(&["--config", cfg.to_str().unwrap(), "gen-data"]).status.success());
    let first = std::fs::read(out.join("train.bmds")).unwrap();
    let other = d.path().join("again");
    assert!(bmoe(&["--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "gen-data"]).status.success());
    assert_eq!(first, std::fs::read(other.join("train.bmds")).unwrap());
    let reseeded = d.path().join("seeded");
    assert!(bmoe(&["--config", cfg.to_str().unwrap(), "--seed", "9", "--out", reseeded.to_str().unwrap(), "gen-data"]).status.success());
    assert_ne!(first, std::fs::read(reseeded.join("train.bmds")).unwrap());
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_config(d.path());
    if let DataSource::Inline(c) = &mut cfg.data {
        for class in &mut c.classes {
            if class.region == RegionId::Body {
                class.region = RegionId::Head;
            }
        }
    }
    let p = write_config(d.path(), &cfg);
    let o = bmoe(&["--config", p.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("body owns no class"));

    let mut v = serde_json::to_value(small_config(d.path())).unwrap();
    v["model"]["depth_of_field"] = serde_json::json!(3);
    std::fs::write(&p, v.to_string()).unwrap();
    assert_eq!(bmoe(&["--config", p.to_str().unwrap(), "gen-data"]).status.code(), Some(2));
}

#[test]
fn pretrain_writes_one_checkpoint_per_region() {
    let (_d, cfg, out) = setup();
    let o = bmoe(&["--config", cfg.to_str().unwrap(), "pretrain"]);
    assert!(o.status.success(), "{o:?}");
    let mut files: Vec<String> = std::fs::read_dir(out.join("pretrain"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".bmo"))
        .collect();
    files.sort();
    assert_eq!(files, ["body.bmo", "head.bmo", "lower_limb.bmo", "upper_limb.bmo"]);
    let log = std::fs::read_to_string(out.join("pretrain").join("pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn pretrain_can_select_regions() {
    let (_d, cfg, out) = setup();
    let o = bmoe(&["--config", cfg.to_str().unwrap(), "pretrain", "--regions", "head"]);
    assert!(o.status.success(), "{o:?}");
    assert!(out.join("pretrain/head.bmo").exists());
    assert!(!out.join("pretrain/body.bmo").exists());
    let head = load(&out.join("pretrain/head.bmo"));
    assert!(head.iter().all(|(n, _)| n.starts_with("semantic.") || n.starts_with("expert.head.")));

    let o = bmoe(&["--config", cfg.to_str().unwrap(), "pretrain", "--regions", "torso"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_resumes_pretrained_experts_exactly() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small_config(d.path());
    let p = write_config(d.path(), &cfg);
    assert!(bmoe(&["--config", p.to_str().unwrap(), "pretrain"]).status.success());
    let out = cfg.output_dir.clone();

    // a zero rate keeps the loaded weights as they are
    cfg.train.learning_rate = 0.0;
    let p = write_config(d.path(), &cfg);
    let pre = out.join("pretrain");
    let o = bmoe(&["--config", p.to_str().unwrap(), "train", "--from-pretrained", pre.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let model = load(&out.join("model.bmo"));
    for r in RegionId::ALL {
        let ck = load(&pre.join(format!("{r}.bmo")));
        let prefix = format!("expert.{r}.");
        assert_eq!(bits(&model, &prefix), bits(&ck, &prefix));
    }
    assert_eq!(bits(&model, "semantic."), bits(&load(&pre.join("lower_limb.bmo")), "semantic."));

    let o = bmoe(&["--config", p.to_str().unwrap(), "train", "--from-pretrained", d.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing pretrained checkpoint"));
}

#[test]
fn training_is_reproducible_and_eval_matches_ablation() {
    let (d, cfg, out) = setup();
    let c = cfg.to_str().unwrap();
    let o = bmoe(&["--config", c, "train"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("top1 "));
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
    let other = d.path().join("rerun");
    assert!(bmoe(&["--config", c, "--out", other.to_str().unwrap(), "train"]).status.success());
    assert_eq!(
        std::fs::read(out.join("metrics.json")).unwrap(),
        std::fs::read(other.join("metrics.json")).unwrap()
    );
    assert_eq!(std::fs::read(out.join("model.bmo")).unwrap(), std::fs::read(other.join("model.bmo")).unwrap());

    let o = bmoe(&["--config", c, "eval"]);
    assert!(o.status.success(), "{o:?}");
    let eval: MetricsReport = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(eval.confusion.len(), 8);

    let o = bmoe(&["--config", c, "ablate", "--mode", "masking"]);
    assert!(o.status.success(), "{o:?}");
    let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(out.join("ablation_experts.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0]["label"], "full");
    let full: MetricsReport = serde_json::from_value(rows[0]["report"].clone()).unwrap();
    assert_eq!(full, eval);
    let streams = std::fs::read_to_string(out.join("ablation_streams.csv")).unwrap();
    assert_eq!(streams.lines().count(), 4);
    assert!(streams.starts_with("configuration,top1,f1_macro\nsemantic_only,"));

    let o = bmoe(&["--config", c, "heatmap"]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(out.join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9);
    assert_eq!(lines[0], "class_id,class_name,head,body,upper_limb,lower_limb");
    assert!(lines[1].starts_with("0,head_twitch,"));
}

#[test]
fn eval_without_checkpoint_fails() {
    let (_d, cfg, _) = setup();
    let o = bmoe(&["--config", cfg.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_block() {
    let d = tempfile::tempdir().unwrap();
    let o = bmoe(&["gradcheck", "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    for block in ["mhsa", "sgp", "se", "tsm", "fusion", "te", "head", "semantic", "motion", "m3e", "end_to_end"] {
        assert!(text.lines().any(|l| l.starts_with(block)), "{block} missing:\n{text}");
    }
    assert!(text.contains("all blocks pass"));
    assert!(d.path().join("gradcheck.json").exists());

    let o = bmoe(&["gradcheck", "--dim", "64"]);
    assert_eq!(o.status.code(), Some(2));
}
