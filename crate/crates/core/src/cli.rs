//! Command-line driver.
//!
//! Every subcommand resolves one [`RunConfig`] from built-in defaults, an
//! optional `key = value` file, repeatable `--set` overrides and `--seed`,
//! then writes the resolved snapshot next to its outputs. The snapshot is a
//! valid `--config` file, so it alone reproduces the run.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{
    concat_gap_eval, concat_gap_train, per_view_probabilities, single_view_eval, weighted_average_eval, WeightedAvgConfig,
};
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::losses::{positive_ratio, LossMode};
use crate::metrics::{assign_groups, default_group_sizes, report, GroupAssignment, MetricsReport, PredictionSet};
use crate::model::{load_checkpoint, save_checkpoint, Dtype, Model, ModelConfig, ParamGroup};
use crate::tensor::ParamStore;
use crate::training::{
    fusion_eval, noisy_student_loop, stage1_predictions, train_stage1, train_stage2, EpochLog, NoisyStudentConfig,
    Stage1Head, TrainConfig, TrainOutput, Validation,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Share of the training split whose labels are dropped for self-training.
    pub unlabeled_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            split_seed: 0,
            unlabeled_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tta: bool,
    /// `val`, `train` or `all`.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tta: true,
            split: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Frontal weights swept by the weighted-average baseline.
    pub weights: Vec<f64>,
    /// Also train the GAP backbone and concat head.
    pub concat: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            weights: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            concat: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seeds: u64,
    pub h: f64,
    pub tol: f64,
    pub tol_model: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            h: 1e-6,
            tol: 1e-5,
            tol_model: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub losses: Vec<LossMode>,
    /// Run the segment-embedding / view-shuffling rows.
    pub fusion: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            losses: vec![LossMode::Bce, LossMode::Wbce, LossMode::Asl, LossMode::Combined],
            fusion: true,
        }
    }
}

/// Desk-scale training presets. The backbone is tiny and trained from
/// scratch, so it uses a far larger step than a pretrained network would.
pub fn desk_stage1() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 10,
        drop_path: 0.0,
        ..TrainConfig::default()
    }
}

pub fn desk_stage2() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 20,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub concat: TrainConfig,
    pub selftrain: NoisyStudentConfig,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
    pub gradcheck: GradCheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            synthetic: SyntheticConfig::default(),
            data: DataConfig::default(),
            stage1: desk_stage1(),
            stage2: desk_stage2(),
            concat: desk_stage2(),
            selftrain: NoisyStudentConfig::default(),
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
            gradcheck: GradCheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Keys that `--seed` sets.
pub const SEED_KEYS: [&str; 5] = ["synthetic.seed", "data.split_seed", "stage1.seed", "stage2.seed", "concat.seed"];

/// Parse `key = value` lines. Blank lines and `#` comments are skipped;
/// values are JSON where they parse as JSON and plain strings otherwise.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                source_name: source.into(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                source_name: source.into(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((key.to_string(), parse_value(v.trim())));
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in line.char_indices() {
        match ch {
            _ if escaped => escaped = false,
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

/// Set a dotted path inside `root`; every segment must already exist.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        };
        let Some(next) = map.get_mut(*part) else {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        };
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        cur = next;
    }
    unreachable!("split yields at least one segment")
}

/// Resolve defaults, file entries, `--set` entries and a seed override, in
/// that order of precedence.
pub fn resolve_config(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut entries = Vec::new();
    if let Some(p) = file {
        let text = fs::read_to_string(p)?;
        entries.extend(parse_config_text(&text, &p.display().to_string())?);
    }
    for (i, s) in sets.iter().enumerate() {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Parse {
                source_name: "--set".into(),
                line: i + 1,
                msg: format!("expected key=value, got `{s}`"),
            });
        };
        entries.push((k.trim().to_string(), parse_value(v.trim())));
    }
    if let Some(s) = seed {
        entries.extend(SEED_KEYS.iter().map(|k| (k.to_string(), Value::from(s))));
    }
    let mut base = RunConfig::default();
    // per-class generator tables follow the class count unless set explicitly
    if let Some(c) = entries
        .iter()
        .rev()
        .find(|(k, _)| k == "synthetic.classes")
        .and_then(|(_, v)| v.as_u64())
    {
        base.synthetic = SyntheticConfig::with_classes(c as usize, base.synthetic.studies, base.synthetic.seed);
    }
    let mut root = serde_json::to_value(&base)?;
    for (k, v) in entries {
        set_path(&mut root, &k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.model.validate()?;
    cfg.synthetic.validate()?;
    for t in [&cfg.stage1, &cfg.stage2, &cfg.concat] {
        t.validate()?;
    }
    Ok(cfg)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

/// The resolved configuration in `key = value` form.
pub fn snapshot(cfg: &RunConfig) -> Result<String> {
    let mut lines = Vec::new();
    flatten("", &serde_json::to_value(cfg)?, &mut lines);
    Ok(lines.join("\n") + "\n")
}

#[derive(Parser, Debug)]
#[command(name = "chexfusion", about = "Multi-view transformer fusion for long-tailed multi-label classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set stage1.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed applied to every seed key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark into `<out>/data`.
    GenData,
    /// Stage 1: single-view backbone and decoder head.
    TrainBackbone {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 2: fusion module on the frozen backbone.
    TrainFusion {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Noisy Student self-training of the single-view model.
    SelfTrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint (fusion or single-view) on a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Single-view, weighted-average and concat+GAP comparisons.
    Baseline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Loss-component and fusion-component ablations.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBackbone { .. } => "train-backbone",
            Command::TrainFusion { .. } => "train-fusion",
            Command::SelfTrain { .. } => "self-train",
            Command::Eval { .. } => "eval",
            Command::Baseline { .. } => "baseline",
            Command::Gradcheck => "gradcheck",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code:
/// 0 on success, 1 on runtime failure, 2 on bad flags or configuration.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match resolve_config(cli.config.as_deref(), &cli.sets, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(t) = cli.threads {
        crate::par::init_threads(t);
    }
    match execute(&cli.command, &cfg, &cli.out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            1
        }
    }
}

struct Outputs<'a> {
    dir: &'a Path,
    name: &'static str,
}

impl Outputs<'_> {
    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}.{suffix}", self.name))
    }

    fn write(&self, suffix: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(suffix);
        fs::write(&p, text)?;
        Ok(p)
    }

    fn jsonl<S: Serialize>(&self, suffix: &str, rows: &[S]) -> Result<()> {
        let mut f = fs::File::create(self.path(suffix))?;
        for r in rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }
}

fn print_log(stage: &str, log: &[EpochLog]) {
    for l in log {
        let map = l.val_map_total.map_or("-".to_string(), |m| format!("{m:.4}"));
        println!(
            "{stage} epoch {:>2}  lr {:.2e}  loss {:.4}  val mAP {map}",
            l.epoch, l.lr, l.train_loss
        );
    }
}

struct Splits {
    train: Dataset,
    val: Dataset,
    groups: GroupAssignment,
    rho: Vec<f64>,
}

fn load_splits(dir: &Path, cfg: &RunConfig) -> Result<Splits> {
    let ds = load_dataset(dir)?;
    let (train, val) = ds.split(cfg.data.val_fraction, cfg.data.split_seed)?;
    let c = train.num_classes();
    let groups = assign_groups(&train.positive_counts(), default_group_sizes(c))?;
    let rho = positive_ratio(&train.targets(), c);
    Ok(Splits {
        train,
        val,
        groups,
        rho,
    })
}

impl Splits {
    fn validation(&self) -> Option<Validation<'_>> {
        (!self.val.is_empty()).then_some(Validation {
            data: &self.val,
            groups: &self.groups,
        })
    }
}

fn save_train_output(out: &Outputs<'_>, stage: &str, t: &TrainOutput) -> Result<()> {
    save_checkpoint(&t.store, &out.dir.join(format!("{stage}.ckpt")), Dtype::F64)?;
    out.jsonl("log.jsonl", &t.log)?;
    if let Some(r) = &t.report {
        out.write("report.json", &r.to_json()?)?;
        println!("{stage}: {}", r.one_line());
    }
    print_log(stage, &t.log);
    Ok(())
}

fn execute(cmd: &Command, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let out = Outputs { dir, name: cmd.name() };
    out.write("config", &snapshot(cfg)?)?;
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| dir.join("data"));
    let model = Model::new(cfg.model.clone())?;
    match cmd {
        Command::GenData => {
            let (ds, _) = generate_synthetic(&cfg.synthetic)?;
            save_dataset(&ds, &dir.join("data"))?;
            println!(
                "wrote {} studies ({} views, {} classes) to {}",
                ds.len(),
                ds.num_views(),
                ds.num_classes(),
                dir.join("data").display()
            );
            println!("positives per class: {:?}", ds.positive_counts());
        }
        Command::TrainBackbone { data } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let t = train_stage1(&model, &s.train, s.validation(), &cfg.stage1, &s.rho, Stage1Head::Decoder)?;
            save_train_output(&out, "stage1", &t)?;
        }
        Command::TrainFusion { data, stage1 } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let s1 = load_checkpoint(&stage1.clone().unwrap_or_else(|| dir.join("stage1.ckpt")))?;
            let t = train_stage2(&model, &s1, &s.train, s.validation(), &cfg.stage2, &s.rho)?;
            save_train_output(&out, "stage2", &t)?;
        }
        Command::SelfTrain { data } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let (labeled, rest) = s.train.split(cfg.data.unlabeled_fraction, cfg.data.split_seed)?;
            let unlabeled = rest.without_labels();
            let rho = positive_ratio(&labeled.targets(), labeled.num_classes());
            let r = noisy_student_loop(&model, &labeled, &unlabeled, s.validation(), &cfg.stage1, &cfg.selftrain, &rho)?;
            save_checkpoint(&r.store, &dir.join("selftrain.ckpt"), Dtype::F64)?;
            out.jsonl("teacher.log.jsonl", &r.teacher_log)?;
            out.jsonl("log.jsonl", &r.iterations)?;
            print_log("teacher", &r.teacher_log);
            for it in &r.iterations {
                let line = it.report.as_ref().map_or("-".into(), |r| r.one_line());
                println!(
                    "student {} ({} studies, {} pseudo-labeled): {line}",
                    it.iteration, it.train_studies, it.pseudo_labeled_studies
                );
            }
            if let Some(r) = r.iterations.last().and_then(|i| i.report.as_ref()) {
                out.write("report.json", &r.to_json()?)?;
            }
        }
        Command::Eval { data, checkpoint } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| dir.join("stage2.ckpt"));
            let loaded = load_checkpoint(&ckpt)?;
            let set = match cfg.eval.split.as_str() {
                "val" => s.val.clone(),
                "train" => s.train.clone(),
                "all" => s.train.union(&s.val)?,
                other => return Err(Error::Config(format!("eval.split must be val, train or all, got `{other}`"))),
            };
            let preds = evaluate_checkpoint(&model, &loaded, &set, cfg.eval.tta)?;
            let r = report(&preds, &s.groups)?;
            preds.save(&out.path("scores.jsonl"), &out.path("labels.jsonl"))?;
            out.write("report.json", &r.to_json()?)?;
            println!("{}", r.one_line());
        }
        Command::Baseline { data, stage1 } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let s1 = load_checkpoint(&stage1.clone().unwrap_or_else(|| dir.join("stage1.ckpt")))?;
            let store = restore(&model, &s1, &[ParamGroup::Backbone, ParamGroup::Head])?;
            let mut rows = vec![("single-view".to_string(), report(&single_view_eval(&model, &store, &s.val, cfg.eval.tta)?, &s.groups)?)];
            let per_view = per_view_probabilities(&model, &store, &s.val, cfg.eval.tta)?;
            for &w in &cfg.baseline.weights {
                let p = weighted_average_eval(&s.val, &per_view, &WeightedAvgConfig::new(w)?)?;
                rows.push((format!("weighted-average w_f={w:.1}"), report(&p, &s.groups)?));
            }
            if cfg.baseline.concat {
                let gap = train_stage1(&model, &s.train, None, &cfg.stage1, &s.rho, Stage1Head::Gap)?;
                let cat = concat_gap_train(&model, &gap.store, &s.train, None, &cfg.concat, &s.rho)?;
                save_checkpoint(&cat.store, &dir.join("concat.ckpt"), Dtype::F64)?;
                rows.push(("concat+gap".into(), report(&concat_gap_eval(&model, &cat.store, &s.val, cfg.eval.tta)?, &s.groups)?));
            }
            emit_table(&out, "report", &rows)?;
        }
        Command::Gradcheck => {
            let g = &cfg.gradcheck;
            let seeds: Vec<u64> = (0..g.seeds).collect();
            let r = run_suite(&seeds, g.h, g.tol, g.tol_model)?;
            let text = r.lines().join("\n") + "\n";
            out.write("report.txt", &text)?;
            print!("{text}");
            if !r.passed {
                return Err(Error::Contract("gradient suite has failures".into()));
            }
            println!("all {} checks pass", r.cases.len());
        }
        Command::Ablate { data } => {
            let s = load_splits(&data_dir(data), cfg)?;
            let mut loss_rows = Vec::new();
            // loss rows use the pooled linear head, the fusion rows the decoder
            for &mode in &cfg.ablate.losses {
                let tc = TrainConfig {
                    loss: mode,
                    ..cfg.stage1.clone()
                };
                if let Some(r) = train_stage1(&model, &s.train, s.validation(), &tc, &s.rho, Stage1Head::Gap)?.report {
                    loss_rows.push((mode.to_string(), r));
                }
            }
            emit_table(&out, "losses", &loss_rows)?;
            if cfg.ablate.fusion {
                let s1 = train_stage1(&model, &s.train, None, &cfg.stage1, &s.rho, Stage1Head::Decoder)?.store;
                let mut rows = Vec::new();
                for (name, segment, shuffle) in [
                    ("no segment, no shuffle", false, false),
                    ("segment", true, false),
                    ("segment + shuffle", true, true),
                ] {
                    let m = Model::new(ModelConfig {
                        use_segment: segment,
                        ..cfg.model.clone()
                    })?;
                    let tc = TrainConfig {
                        shuffle_views: shuffle,
                        ..cfg.stage2.clone()
                    };
                    if let Some(r) = train_stage2(&m, &s1, &s.train, s.validation(), &tc, &s.rho)?.report {
                        rows.push((name.to_string(), r));
                    }
                }
                emit_table(&out, "fusion", &rows)?;
            }
        }
    }
    Ok(())
}

fn restore(model: &Model, loaded: &ParamStore, groups: &[ParamGroup]) -> Result<ParamStore> {
    let mut store = model.init_params(0, groups)?;
    store.restore_exact(loaded)?;
    Ok(store)
}

/// Classes predicted by a checkpoint, read from its output layer.
pub fn checkpoint_classes(store: &ParamStore) -> Option<usize> {
    ["head.proj.b", "gap_head.b", "concat_head.b"]
        .iter()
        .find_map(|n| store.get(n).ok().map(|p| p.value.shape()[0]))
}

/// Predictions of a fusion, decoder or concat checkpoint, chosen by the
/// parameters it contains.
pub fn evaluate_checkpoint(model: &Model, loaded: &ParamStore, data: &Dataset, tta: bool) -> Result<PredictionSet> {
    if let Some(k) = checkpoint_classes(loaded) {
        if k != data.num_classes() {
            return Err(Error::Config(format!(
                "class count mismatch: checkpoint has {k} classes, dataset has {}",
                data.num_classes()
            )));
        }
    }
    if loaded.contains("fusion.pad") {
        let store = restore(model, loaded, &[ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Fusion])?;
        fusion_eval(model, &store, data, None, tta)
    } else if loaded.contains("concat_head.w") {
        let store = restore(model, loaded, &[ParamGroup::Backbone, ParamGroup::GapHead, ParamGroup::ConcatHead])?;
        concat_gap_eval(model, &store, data, tta)
    } else if loaded.contains("head.query") {
        let store = restore(model, loaded, &[ParamGroup::Backbone, ParamGroup::Head])?;
        stage1_predictions(model, &store, data, tta, Stage1Head::Decoder)
    } else if loaded.contains("gap_head.w") {
        let store = restore(model, loaded, &[ParamGroup::Backbone, ParamGroup::GapHead])?;
        stage1_predictions(model, &store, data, tta, Stage1Head::Gap)
    } else {
        Err(Error::Checkpoint("checkpoint holds no recognised head".into()))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("  -  ".into(), |x| format!("{x:.3}"))
}

/// Rows as a plain-text table plus JSON.
fn emit_table(out: &Outputs<'_>, stem: &str, rows: &[(String, MetricsReport)]) -> Result<()> {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut text = format!(
        "{:<width$}  {:>5}  {:>5}  {:>6}  {:>5}  {:>5}\n",
        "method", "mAP", "head", "medium", "tail", "AUROC"
    );
    for (name, r) in rows {
        text.push_str(&format!(
            "{name:<width$}  {:>5}  {:>5}  {:>6}  {:>5}  {:>5}\n",
            format!("{:.3}", r.map_total),
            fmt_opt(r.map_head),
            fmt_opt(r.map_medium),
            fmt_opt(r.map_tail),
            fmt_opt(r.auroc_total)
        ));
    }
    print!("{text}");
    out.write(&format!("{stem}.txt"), &text)?;
    let json: Vec<Value> = rows
        .iter()
        .map(|(n, r)| Ok(serde_json::json!({ "method": n, "report": serde_json::to_value(r)? })))
        .collect::<Result<_>>()?;
    out.write(&format!("{stem}.json"), &serde_json::to_string_pretty(&json)?)?;
    Ok(())
}
