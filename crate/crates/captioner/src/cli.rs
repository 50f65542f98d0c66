//! Command-line surface. Every command resolves its configuration with the
//! precedence flag > config file > built-in default, writes a run manifest
//! before doing real work, and exits 0 on success, 1 on validation problems,
//! and 2 on numeric ones.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::anpm::{mine_graph, AnchorRule, GroupRule};
use crate::inference::{
    eval_items, eval_items_from_refs, generate_corpus, load_generations, save_generations,
    AcgSource, CaptionPick,
};
use crate::metrics::evaluate;
use crate::model::{AnchorLossKind, GraphStrategy, Model, ModelConfig, ModelError};
use crate::scene::{generate_synthetic, load_scenes, save_scenes, FeatureDims, SynthConfig};
use crate::trainer::{gradcheck, train, TrainConfig, TrainError};
use crate::vocab::Vocabulary;

/// Commit the binary was built from, or "unknown" outside a checkout.
pub const BUILD_ID: &str = env!("BUILD_ID");

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<crate::scene::DataError> for CliError {
    fn from(e: crate::scene::DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Backbone(backbone::BackboneError::NonFiniteGrad { .. }) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Backbone(backbone::BackboneError::NonFiniteGrad { .. }) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "anchor-captioner",
    version,
    about = "Caption scenes of region and OCR features; refine captions around selected text anchors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic scene corpus as JSONL
    Synth(SynthArgs),
    /// Report the anchor and group that reference mining recovers per scene
    MineAcg(MineAcgArgs),
    /// Train a model from a config file (flat key=value or JSON)
    Train(TrainArgs),
    /// Decode captions from a trained checkpoint
    Generate(GenerateArgs),
    /// Score generated captions, or the references themselves
    Eval(EvalArgs),
    /// Check analytic gradients of the training loss against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub scenes: usize,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 6)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub refs: usize,
    #[arg(long, default_value_t = 32)]
    pub d_app: usize,
    #[arg(long, default_value_t = 16)]
    pub d_ft: usize,
    #[arg(long, default_value_t = 16)]
    pub d_phoc: usize,
}

#[derive(Args)]
pub struct MineAcgArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Write the audit here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key=value or JSON file; must name the training data unless --data is given
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scene corpus, overriding the config file's `data` entry
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from an earlier checkpoint (expects vocab.txt beside it)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Guide refined-caption training with predicted groups instead of mined ones
    #[arg(long)]
    pub use_predicted_acg: bool,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Pick anchors by rule instead of the trained selector: large | centre | gt
    #[arg(long)]
    pub anchor_rule: Option<String>,
    /// Group rule when --anchor-rule is set: all | around | random
    #[arg(long)]
    pub group_rule: Option<String>,
    /// Group size for the around and random rules
    #[arg(long, default_value_t = 5)]
    pub k_around: usize,
    /// Seed for the random grouping rule
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Generations JSONL; required unless --captions-from refs
    #[arg(long)]
    pub gen: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which captions to score: refined | visual | refs
    #[arg(long, default_value = "refined")]
    pub captions_from: String,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Model size: tiny | desk
    #[arg(long, default_value = "tiny")]
    pub dims: String,
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Minimum number of parameter coordinates to sample
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

/// Written before any heavy work so a run can be reproduced from it alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix: u64,
    pub started: String,
    pub build: String,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Render a unix timestamp as UTC "YYYY-MM-DDTHH:MM:SSZ" without pulling in a
/// calendar dependency; the civil-date arithmetic is the standard days-to-date
/// conversion over the proleptic Gregorian calendar.
fn iso_utc(unix: u64) -> String {
    let days = unix / 86_400;
    let secs = unix % 86_400;
    let (h, m, s) = (secs / 3600, (secs % 3600) / 60, secs % 60);
    let mut z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    z = z.rem_euclid(146_097);
    let yoe = (z - z / 1460 + z / 36_524 - z / 146_096) / 365;
    let doy = z - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!("{year:04}-{month:02}-{day:02}T{h:02}:{m:02}:{s:02}Z")
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: u64, outputs: Vec<String>) -> RunManifest {
        let t = now_unix();
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            started_unix: t,
            started: iso_utc(t),
            build: BUILD_ID.to_string(),
            outputs,
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Validation(format!("encode manifest: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| CliError::Validation(format!("write manifest {}: {e}", path.display())))
    }
}

/// Manifest path for a command whose primary output is the given file.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "out".into());
    name.push(".run.json");
    out.with_file_name(name)
}

/// Optional settings accepted from a config file. Unknown keys are rejected so
/// typos fail loudly instead of silently training with defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub data: Option<String>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub min_freq: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub use_predicted_acg: Option<bool>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub fuse_layers: Option<usize>,
    pub vcap_layers: Option<usize>,
    pub tcap_layers: Option<usize>,
    pub acg_layers: Option<usize>,
    pub n_objects: Option<usize>,
    pub m_tokens: Option<usize>,
    pub c_steps: Option<usize>,
    pub strategy: Option<String>,
    pub graph_threshold: Option<f64>,
    pub anchor_loss: Option<String>,
}

impl ConfigPatch {
    /// Parse either a JSON object or flat `key=value` lines (with `#` comments).
    pub fn parse(text: &str) -> Result<ConfigPatch, String> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            return serde_json::from_str(trimmed).map_err(|e| format!("config JSON: {e}"));
        }
        let mut map = serde_json::Map::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value, got {raw:?}", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            let value = if v == "true" || v == "false" {
                json!(v == "true")
            } else if let Ok(n) = v.parse::<u64>() {
                json!(n)
            } else if let Ok(x) = v.parse::<f64>() {
                json!(x)
            } else {
                json!(v)
            };
            map.insert(k.to_string(), value);
        }
        serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| format!("config: {e}"))
    }

    pub fn load(path: &Path) -> Result<ConfigPatch, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("read config {}: {e}", path.display()))?;
        ConfigPatch::parse(&text)
    }

    /// Lay this patch over a config. Feature dims are not configurable here;
    /// they always come from the dataset header.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<(), String> {
        macro_rules! set {
            ($field:ident, $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        set!(batch_size, cfg.batch_size);
        set!(iterations, cfg.iterations);
        set!(learning_rate, cfg.learning_rate);
        set!(seed, cfg.seed);
        set!(alpha, cfg.alpha);
        set!(beta, cfg.beta);
        set!(eta, cfg.eta);
        set!(min_freq, cfg.min_freq);
        set!(checkpoint_every, cfg.checkpoint_every);
        set!(use_predicted_acg, cfg.use_predicted_acg);
        set!(d, cfg.model.d);
        set!(heads, cfg.model.heads);
        set!(fuse_layers, cfg.model.fuse_layers);
        set!(vcap_layers, cfg.model.vcap_layers);
        set!(tcap_layers, cfg.model.tcap_layers);
        set!(acg_layers, cfg.model.acg_layers);
        set!(n_objects, cfg.model.n_objects);
        set!(m_tokens, cfg.model.m_tokens);
        set!(c_steps, cfg.model.c_steps);
        set!(graph_threshold, cfg.model.graph_threshold);
        if let Some(s) = &self.strategy {
            cfg.model.strategy = GraphStrategy::parse(s)
                .ok_or_else(|| format!("unknown strategy {s:?} (sequence | independent | multiple)"))?;
        }
        if let Some(s) = &self.anchor_loss {
            cfg.model.anchor_loss = match s.as_str() {
                "softmax_bce" => AnchorLossKind::SoftmaxBce,
                "categorical_ce" => AnchorLossKind::CategoricalCe,
                other => return Err(format!("unknown anchor_loss {other:?} (softmax_bce | categorical_ce)")),
            };
        }
        Ok(())
    }
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::MineAcg(a) => cmd_mine_acg(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        scenes: a.scenes,
        objects_per_scene: a.objects,
        tokens_per_scene: a.tokens,
        refs_per_scene: a.refs,
        dims: FeatureDims { d_app: a.d_app, d_ft: a.d_ft, d_phoc: a.d_phoc },
        seed: a.seed,
    };
    let manifest = RunManifest::new(
        "synth",
        serde_json::to_value(&cfg).map_err(|e| CliError::Validation(e.to_string()))?,
        a.seed,
        vec![a.out.display().to_string()],
    );
    manifest.write(&sidecar(&a.out))?;
    let ds = generate_synthetic(&cfg)?;
    save_scenes(&a.out, &ds)?;
    eprintln!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

/// One audit line per scene, even when mining finds nothing.
#[derive(Serialize, Deserialize)]
struct MineRecord {
    id: String,
    anchor: Option<String>,
    graph: Vec<String>,
}

fn cmd_mine_acg(a: MineAcgArgs) -> Result<(), CliError> {
    let ds = load_scenes(&a.data)?;
    if let Some(out) = &a.out {
        let manifest = RunManifest::new(
            "mine-acg",
            json!({ "data": a.data.display().to_string() }),
            ds.seed,
            vec![out.display().to_string()],
        );
        manifest.write(&sidecar(out))?;
    }
    let mut lines = String::new();
    let mut mined_count = 0usize;
    for scene in &ds.scenes {
        let mined = mine_graph(scene);
        mined_count += usize::from(mined.anchor.is_some());
        let record = MineRecord {
            id: scene.id.clone(),
            anchor: mined.anchor.map(|i| scene.ocr[i].text.clone()),
            graph: (0..scene.ocr.len())
                .filter(|&i| mined.in_graph[i])
                .map(|i| scene.ocr[i].text.clone())
                .collect(),
        };
        lines.push_str(
            &serde_json::to_string(&record).map_err(|e| CliError::Validation(e.to_string()))?,
        );
        lines.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, &lines)
            .map_err(|e| CliError::Validation(format!("write {}: {e}", path.display())))?,
        None => print!("{lines}"),
    }
    eprintln!("mined anchors for {mined_count} of {} scenes", ds.scenes.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let patch = ConfigPatch::load(&a.config).map_err(CliError::Validation)?;
    let mut cfg = TrainConfig::default();
    patch.apply(&mut cfg).map_err(CliError::Validation)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(iterations) = a.iterations {
        cfg.iterations = iterations;
    }
    if let Some(batch) = a.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(s) = &a.strategy {
        cfg.model.strategy = GraphStrategy::parse(s).ok_or_else(|| {
            CliError::Validation(format!("unknown strategy {s:?} (sequence | independent | multiple)"))
        })?;
    }
    if a.use_predicted_acg {
        cfg.use_predicted_acg = true;
    }

    let data_path: PathBuf = match (&a.data, &patch.data) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(CliError::Validation(
                "no training data: pass --data or set data= in the config file".into(),
            ))
        }
    };
    let ds = load_scenes(&data_path)?;
    cfg.model.dims = ds.dims;
    cfg.validate()?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Validation(format!("create {}: {e}", a.out.display())))?;
    let manifest = RunManifest::new(
        "train",
        json!({
            "train": cfg,
            "data": data_path.display().to_string(),
            "resume": a.resume.as_ref().map(|p| p.display().to_string()),
        }),
        cfg.seed,
        vec![
            a.out.join("checkpoint.json").display().to_string(),
            a.out.join("vocab.txt").display().to_string(),
            a.out.join("report.json").display().to_string(),
        ],
    );
    manifest.write(&a.out.join("run.json"))?;

    let outcome = train(&ds, &cfg, &a.out, a.resume.as_deref())?;
    let report_path = a.out.join("report.json");
    let text = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| CliError::Validation(format!("encode report: {e}")))?;
    std::fs::write(&report_path, text)
        .map_err(|e| CliError::Validation(format!("write {}: {e}", report_path.display())))?;

    let r = &outcome.report;
    let last = r.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
    eprintln!(
        "trained {} iterations: final loss {last:.4}, anchor acc {:.3}, graph f1 {:.3}, \
         visual token acc {:.3}, refined token acc {:.3}",
        r.iterations, r.anchor_accuracy, r.graph_f1, r.visual_token_accuracy, r.text_token_accuracy
    );
    eprintln!("checkpoint: {}", r.checkpoint);
    Ok(())
}

fn parse_acg_source(a: &GenerateArgs) -> Result<AcgSource, CliError> {
    match (&a.anchor_rule, &a.group_rule) {
        (None, None) => Ok(AcgSource::Predicted),
        (Some(anchor), Some(group)) => {
            let anchor = AnchorRule::parse(anchor).ok_or_else(|| {
                CliError::Validation(format!("unknown anchor rule {anchor:?} (large | centre | gt)"))
            })?;
            let group = GroupRule::parse(group).ok_or_else(|| {
                CliError::Validation(format!("unknown group rule {group:?} (all | around | random)"))
            })?;
            Ok(AcgSource::Rule { anchor, group, k_around: a.k_around, seed: a.seed })
        }
        _ => Err(CliError::Validation(
            "--anchor-rule and --group-rule must be given together".into(),
        )),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    if a.topk == 0 {
        return Err(CliError::Validation("--topk must be >= 1".into()));
    }
    let source = parse_acg_source(&a)?;
    let vocab_path = a.ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt");
    let vocab = Vocabulary::load(&vocab_path)?;
    let (model, _state) = Model::load_checkpoint(&a.ckpt, vocab)?;
    let ds = load_scenes(&a.data)?;
    if ds.dims != model.config.dims {
        return Err(CliError::Validation(format!(
            "dataset dims {:?} do not match the checkpoint's {:?}",
            ds.dims, model.config.dims
        )));
    }

    let manifest = RunManifest::new(
        "generate",
        json!({
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "topk": a.topk,
            "acg": source,
        }),
        a.seed,
        vec![a.out.display().to_string()],
    );
    manifest.write(&sidecar(&a.out))?;

    let gens = generate_corpus(&model, &ds, a.topk, &source)?;
    save_generations(&a.out, &gens)?;
    let refined: usize = gens.iter().map(|g| g.refined.len()).sum();
    eprintln!("wrote {} generations ({refined} refined captions) to {}", gens.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ds = load_scenes(&a.data)?;
    let (items, source) = match a.captions_from.as_str() {
        "refs" => (eval_items_from_refs(&ds), "refs"),
        mode @ ("refined" | "visual") => {
            let gen_path = a.gen.as_ref().ok_or_else(|| {
                CliError::Validation(format!("--gen is required with --captions-from {mode}"))
            })?;
            let gens = load_generations(gen_path)?;
            let pick = if mode == "visual" { CaptionPick::Visual } else { CaptionPick::Refined };
            (eval_items(&ds, &gens, pick)?, mode)
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown --captions-from {other:?} (refined | visual | refs)"
            )))
        }
    };

    let manifest = RunManifest::new(
        "eval",
        json!({
            "gen": a.gen.as_ref().map(|p| p.display().to_string()),
            "data": a.data.display().to_string(),
            "captions_from": a.captions_from,
        }),
        ds.seed,
        vec![a.out.display().to_string()],
    );
    manifest.write(&sidecar(&a.out))?;

    let report = evaluate(&items, source);
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Validation(format!("encode report: {e}")))?;
    std::fs::write(&a.out, text)
        .map_err(|e| CliError::Validation(format!("write {}: {e}", a.out.display())))?;
    let c = &report.corpus;
    eprintln!(
        "{} images ({source}): bleu4 {:?}, cider {:?}, div1 {:?}, div2 {:?}, self_cider {:?}, cover {:?}",
        report.images, c.bleu4, c.cider, c.div1, c.div2, c.self_cider, c.cover_ratio
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = match a.dims.as_str() {
        "tiny" => ModelConfig::tiny(),
        "desk" => ModelConfig::default(),
        other => {
            return Err(CliError::Validation(format!("unknown --dims {other:?} (tiny | desk)")))
        }
    };
    eprintln!(
        "{}",
        json!({
            "command": "gradcheck",
            "config": { "dims": a.dims, "seed": a.seed, "samples": a.samples, "step": a.step, "tolerance": a.tolerance },
            "seed": a.seed,
            "build": BUILD_ID,
        })
    );
    let result = gradcheck(cfg, a.seed, a.samples, a.step)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
        result.max_rel, result.coords, result.worst_param, result.worst_index
    );
    if result.max_rel <= a.tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient mismatch: max relative error {:.3e} exceeds tolerance {:.1e}",
            result.max_rel, a.tolerance
        )))
    }
}
