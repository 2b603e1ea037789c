//! The `attnpose` command line: training, head fine-tuning, evaluation,
//! attention heatmaps and ablation sweeps, each writing into `--out`.
//!
//! Every command writes the fully resolved config to `config.toml` and a
//! `manifest.json` describing its inputs, so a run can be repeated with
//! `--config <out>/config.toml`.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{DataConfig, RunConfig};

use crate::data::{load_rgb, PoseDataset, Split};
use crate::eval::reference::{split_baseline, BASELINE, THIS_METHOD};
use crate::eval::{
    aggregate_and_rank, baseline_comparison, evaluate, export_heatmap, read_results, scene_medians,
    write_heatmap, write_ranking, write_results, BranchKind, MethodTable,
};
use crate::model::{checkpoint, extract_token_attention, Endpoint, Model, ModelConfig};
use crate::train::{augment, train_stage1, train_stage2, write_loss_curve, Head, Mode};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "attnpose",
    version,
    about = "Absolute camera pose regression with dual attention encoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every parameter on the combined loss (stage 1).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune one regression head with everything else frozen (stage 2).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        head: HeadArg,
    },
    /// Per-scene median errors of a checkpoint, optionally ranked against
    /// reference tables.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to evaluate.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Results CSVs (scene,method,pos_median_m,ang_median_deg) to rank.
        #[arg(long = "reference-tables", num_args = 1..)]
        reference_tables: Vec<PathBuf>,
    },
    /// Token attention heatmaps of both encoders for one image.
    Attn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Encoder block to read; negative values count from the last.
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        layer: isize,
    },
    /// Train and evaluate one model per setting of an ablation axis on the
    /// synthetic scene.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
}

/// Options shared by every command. Flags are applied after `--set`
/// overrides, which are applied after the config file.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config with [model], [train], [augment] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Use the synthetic scene instead of on-disk listings.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub scene_seed: Option<u64>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs of the stage being run.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Position,
    Orientation,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Position => Head::Position,
            HeadArg::Orientation => Head::Orientation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    /// Backbone channel widths scaled by 0.5, 1 and 2.
    BackboneWidth,
    /// Encoder blocks per branch: 2, 4, 6, 8.
    Layers,
    /// Encoder width: 64, 128, 256, 512.
    Dim,
    /// Every assignment of the two endpoints to the two branches.
    Routing,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::BackboneWidth => "backbone_width",
            AblationAxis::Layers => "layers",
            AblationAxis::Dim => "dim",
            AblationAxis::Routing => "routing",
        }
    }

    /// The settings of this axis as `(label, model config)` pairs derived
    /// from `base`.
    pub fn settings(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        match self {
            AblationAxis::BackboneWidth => [0.5, 1.0, 2.0]
                .iter()
                .map(|&m: &f64| {
                    let mut c = base.clone();
                    c.backbone_widths = base
                        .backbone_widths
                        .map(|w| ((w as f64 * m).round() as usize).max(1));
                    (format!("x{m}"), c)
                })
                .collect(),
            AblationAxis::Layers => [2, 4, 6, 8]
                .iter()
                .map(|&n| {
                    let mut c = base.clone();
                    c.blocks = n;
                    (n.to_string(), c)
                })
                .collect(),
            AblationAxis::Dim => [64, 128, 256, 512]
                .iter()
                .map(|&d| {
                    let mut c = base.clone();
                    c.mlp_hidden = (base.mlp_hidden * d / base.dim).max(1);
                    c.dim = d;
                    (d.to_string(), c)
                })
                .collect(),
            AblationAxis::Routing => {
                let mut out = Vec::new();
                for p in Endpoint::ALL {
                    for o in Endpoint::ALL {
                        let mut c = base.clone();
                        c.position_map = p;
                        c.orientation_map = o;
                        out.push((format!("{}-{}", p.name(), o.name()), c));
                    }
                }
                out
            }
        }
    }
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub parameters: usize,
    pub pos_median_m: f64,
    pub ang_median_deg: f64,
}

#[derive(Debug, Serialize)]
struct DataSummary {
    scene: String,
    split: &'static str,
    samples: usize,
    listing_hash: String,
}

impl DataSummary {
    fn of(d: &PoseDataset) -> Self {
        DataSummary {
            scene: d.scene.clone(),
            split: match d.split {
                Split::Train => "train",
                Split::Test => "test",
            },
            samples: d.len(),
            listing_hash: d.content_hash(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    data: Vec<DataSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_checkpoint_sha256: Option<String>,
    outputs: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Finetune {
            common,
            checkpoint,
            head,
        } => cmd_finetune(&common, &checkpoint, head.into()),
        Command::Eval {
            common,
            checkpoint,
            split,
            reference_tables,
        } => cmd_eval(&common, &checkpoint, split, &reference_tables),
        Command::Attn {
            common,
            checkpoint,
            image,
            layer,
        } => cmd_attn(&common, &checkpoint, &image, layer),
        Command::Ablate { common, axis } => cmd_ablate(&common, axis),
    }
}

/// Reads the config and applies overrides and flags. `epochs_key` is the
/// key `--epochs` sets.
fn resolve(common: &Common, epochs_key: &str) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    if common.synthetic {
        overrides.push("data.synthetic=true".into());
    }
    if let Some(s) = common.scene_seed {
        overrides.push(format!("data.scene.seed={s}"));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    if let Some(e) = common.epochs {
        overrides.push(format!("{epochs_key}={e}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_provenance(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    data: Vec<DataSummary>,
    input_checkpoint_sha256: Option<String>,
    mut outputs: Vec<String>,
) -> Result<()> {
    let toml_path = dir.join("config.toml");
    std::fs::write(&toml_path, config.resolved_toml()?).map_err(|e| Error::io(&toml_path, e))?;
    outputs.push("config.toml".into());
    outputs.sort();
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.train.seed,
        config: serde_json::to_value(RunConfig {
            train: config.train.resolved(),
            ..config.clone()
        })
        .map_err(|e| Error::Config(e.to_string()))?,
        data,
        input_checkpoint_sha256,
        outputs,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &std::fs::read(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Loads a checkpoint and checks it was built from `expected`. The
/// orientation-prior fields are ignored since fine-tuning changes them.
fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = checkpoint::load(path)?;
    let mut want = expected.clone();
    want.orientation_prior = model.config.orientation_prior;
    want.prior_warm_start = model.config.prior_warm_start;
    if want != model.config {
        return Err(Error::Config(format!(
            "{}: checkpoint model config does not match the run config\n  checkpoint: {:?}\n  config:     {:?}",
            path.display(),
            model.config,
            expected
        )));
    }
    Ok(model)
}

fn cmd_train(common: &Common) -> Result<()> {
    let config = resolve(common, "train.epochs")?;
    let train = config.data.load(Split::Train)?;
    let mut model = Model::new(config.model.clone(), config.train.seed)?;
    let report = train_stage1(&mut model, &train, &config.train, &config.augment)?;
    prepare_out(&common.out)?;
    checkpoint::save(&model, &common.out.join("model.ckpt"))?;
    write_loss_curve(&common.out.join("loss.csv"), &report.curve)?;
    write_provenance(
        &common.out,
        "train",
        &config,
        vec![DataSummary::of(&train)],
        None,
        vec!["model.ckpt".into(), "loss.csv".into()],
    )?;
    if let Some(last) = report.curve.last() {
        println!(
            "trained {} epochs ({} steps): L_x {:.4} L_q {:.4} L_p {:.4}",
            report.curve.len(),
            report.steps,
            last.l_x,
            last.l_q,
            last.l_p
        );
    }
    Ok(())
}

fn cmd_finetune(common: &Common, ckpt: &Path, head: Head) -> Result<()> {
    let config = resolve(common, "train.stage2_epochs")?;
    let mut model = load_matching(ckpt, &config.model)?;
    let input_hash = file_sha256(ckpt)?;
    let train = config.data.load(Split::Train)?;
    let report = train_stage2(&mut model, &train, &config.train, &config.augment, head)?;
    prepare_out(&common.out)?;
    checkpoint::save(&model, &common.out.join("model.ckpt"))?;
    write_loss_curve(&common.out.join("loss.csv"), &report.curve)?;
    let mut resolved = config.clone();
    resolved.model = model.config.clone();
    write_provenance(
        &common.out,
        match head {
            Head::Position => "finetune position",
            Head::Orientation => "finetune orientation",
        },
        &resolved,
        vec![DataSummary::of(&train)],
        Some(input_hash),
        vec!["model.ckpt".into(), "loss.csv".into()],
    )?;
    println!("fine-tuned {head:?} head for {} epochs", report.curve.len());
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, split: SplitArg, tables: &[PathBuf]) -> Result<()> {
    let config = resolve(common, "train.epochs")?;
    let model = load_matching(ckpt, &config.model)?;
    let data = config.data.load(match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    })?;
    let records = evaluate(&model, &data, &config.augment)?;
    let (pos, ang) = scene_medians(&records)?;
    let references = tables
        .iter()
        .map(|p| read_results(p))
        .collect::<Result<Vec<_>>>()?;

    prepare_out(&common.out)?;
    let mut outputs = vec!["results.csv".to_string(), "errors.csv".to_string()];
    let own = MethodTable::new(THIS_METHOD, vec![(data.scene.clone(), pos, ang)])?;
    write_results(&common.out.join("results.csv"), &[own])?;
    write_errors(&common.out.join("errors.csv"), &records)?;
    println!(
        "{}: median position {pos:.4}, median orientation {ang:.3} deg",
        data.scene
    );

    for (path, tables) in tables.iter().zip(references) {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "reference".into());
        let (baseline, methods) = split_baseline(tables);
        let ranked = aggregate_and_rank(&methods)?;
        let name = format!("{stem}.ranking.csv");
        write_ranking(&common.out.join(&name), &ranked)?;
        outputs.push(name);
        println!("{stem}:");
        for r in &ranked {
            println!(
                "  {:>2}  {:<16} {:>7.2} m {:>7.2} deg  (ranks {} / {})",
                r.final_rank, r.method, r.avg_pos, r.avg_ang, r.pos_rank, r.ang_rank
            );
        }
        if let (Some(base), Some(ours)) =
            (baseline, methods.iter().find(|t| t.method == THIS_METHOD))
        {
            let cmp = baseline_comparison(ours, &base)?;
            let name = format!("{stem}.baseline.csv");
            write_baseline(&common.out.join(&name), &cmp)?;
            outputs.push(name);
            println!(
                "  vs {BASELINE}: {}/{} scene cells below, {}/{} entries counting the averages",
                cmp.cells_under(),
                cmp.cells(),
                cmp.entries_under(),
                cmp.entries()
            );
        }
    }
    write_provenance(
        &common.out,
        "eval",
        &config,
        vec![DataSummary::of(&data)],
        Some(file_sha256(ckpt)?),
        outputs,
    )
}

fn write_errors(path: &Path, records: &[crate::eval::EvalRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        image: &'a str,
        position_error: f64,
        angular_error_deg: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::train::csv_error(path, e))?;
    for r in records {
        w.serialize(Row {
            image: &r.image_id,
            position_error: r.position_error(),
            angular_error_deg: r.angular_error()?,
        })
        .map_err(|e| crate::train::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_baseline(path: &Path, cmp: &crate::eval::BaselineComparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::train::csv_error(path, e))?;
    for d in &cmp.deltas {
        w.serialize(d)
            .map_err(|e| crate::train::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_attn(common: &Common, ckpt: &Path, image: &Path, layer: isize) -> Result<()> {
    let config = resolve(common, "train.epochs")?;
    let model = load_matching(ckpt, &config.model)?;
    let raw = load_rgb(image)?;
    // the test path draws nothing
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = augment(&raw, &config.augment, Mode::Test, &mut rng)?;
    let pred = model.predict(&input)?;
    let size = config.model.input_size;
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    prepare_out(&common.out)?;
    let mut outputs = Vec::new();
    for (kind, attn, grid) in [
        (
            BranchKind::Position,
            &pred.position_attention,
            pred.position_grid,
        ),
        (
            BranchKind::Orientation,
            &pred.orientation_attention,
            pred.orientation_grid,
        ),
    ] {
        let heat = extract_token_attention(attn, layer, grid)?;
        let art = export_heatmap(&heat, (size, size), kind)?;
        let (png, csv) = write_heatmap(&art, &common.out, &id)?;
        for p in [png, csv] {
            outputs.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
        println!("{} attention: {}x{} map", kind.name(), grid.0, grid.1);
    }
    write_provenance(
        &common.out,
        "attn",
        &config,
        vec![],
        Some(file_sha256(ckpt)?),
        outputs,
    )
}

fn cmd_ablate(common: &Common, axis: AblationAxis) -> Result<()> {
    let mut config = resolve(common, "train.epochs")?;
    config.data.synthetic = true;
    let train = config.data.load(Split::Train)?;
    let test = config.data.load(Split::Test)?;
    prepare_out(&common.out)?;
    let mut rows = Vec::new();
    for (label, model_config) in axis.settings(&config.model) {
        let dir = common.out.join(format!("{}-{label}", axis.name()));
        prepare_out(&dir)?;
        let setting = RunConfig {
            model: model_config,
            ..config.clone()
        };
        setting.validate()?;
        let mut model = Model::new(setting.model.clone(), setting.train.seed)?;
        let report = train_stage1(&mut model, &train, &setting.train, &setting.augment)?;
        let (pos, ang) = scene_medians(&evaluate(&model, &test, &setting.augment)?)?;
        write_loss_curve(&dir.join("loss.csv"), &report.curve)?;
        write_provenance(
            &dir,
            "ablate",
            &setting,
            vec![DataSummary::of(&train), DataSummary::of(&test)],
            None,
            vec!["loss.csv".into()],
        )?;
        println!("{} {label}: {pos:.4} / {ang:.3} deg", axis.name());
        rows.push(AblationRow {
            axis: axis.name().into(),
            value: label,
            parameters: model.store.numel(),
            pos_median_m: pos,
            ang_median_deg: ang,
        });
    }
    let path = common.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::train::csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r)
            .map_err(|e| crate::train::csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_provenance(
        &common.out,
        "ablate",
        &config,
        vec![DataSummary::of(&train), DataSummary::of(&test)],
        None,
        vec!["ablation.csv".into()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grids() {
        let base = ModelConfig::default();
        assert_eq!(AblationAxis::Layers.settings(&base).len(), 4);
        let dims: Vec<usize> = AblationAxis::Dim
            .settings(&base)
            .iter()
            .map(|(_, c)| c.dim)
            .collect();
        assert_eq!(dims, [64, 128, 256, 512]);
        let routing = AblationAxis::Routing.settings(&base);
        assert_eq!(routing.len(), 4);
        for (_, c) in AblationAxis::Dim.settings(&base).iter().chain(&routing) {
            c.validate().unwrap();
        }
        assert_eq!(AblationAxis::BackboneWidth.settings(&base).len(), 3);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "attnpose",
            "attn",
            "--out",
            "o",
            "--checkpoint",
            "c",
            "--image",
            "i",
            "--layer",
            "-2",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Attn { layer: -2, .. }));
        assert!(Cli::try_parse_from([
            "attnpose",
            "finetune",
            "--out",
            "o",
            "--checkpoint",
            "c",
            "--head",
            "scale",
        ])
        .is_err());
    }
}
