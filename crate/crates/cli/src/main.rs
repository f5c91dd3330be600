//! `lorot`: train, evaluate and reproduce localizable-rotation experiments.
//!
//! Exit codes:
//! * 0: success
//! * 1: runtime failure (I/O, training, evaluation)
//! * 2: invalid arguments or configuration
//! * 3: checkpoint or dataset does not match
//! * 4: output directory is locked by another run

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lorot::data::{build_imbalanced, write_packed, ImbalanceProfile, ImbalanceSpec, OodEvalPair, Registry, ResizeRule, Split};
use lorot::eval::{self, ScoreKind, ShiftTransform};
use lorot::experiment::{
    confidence_svg, run_experiment, run_recipe, ExperimentConfig, ExperimentKind, RecipeScale, Report,
    RunCache,
};
use lorot::io_util::{write_atomic, DirLock};
use lorot::model::{load_checkpoint, DualHeadModel};
use lorot::rng::{self, tag};
use lorot::train::AdversarialConfig;
use lorot::transforms::{transform_sample, PretextTask, Variant};
use lorot::{Error, ImageTensor};

#[derive(Parser)]
#[command(name = "lorot", version, about = "Localizable rotation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config; writes checkpoints, histories, report and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        kind: EvalKind,
    },
    /// Run a named desk-scale recipe.
    Repro {
        recipe: String,
        #[arg(long, value_enum, default_value_t = Scale::Desk)]
        scale: Scale,
        #[arg(long, default_value = "runs")]
        output: PathBuf,
    },
    /// Write before/after PNG pairs of pretext transforms.
    Preview {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = TransformArg::LorotI)]
        transform: TransformArg,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one model per λ from a config template.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        lambdas: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a long-tailed copy of a training set in the packed format.
    BuildImbalanced {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        mu: f64,
        #[arg(long, value_enum, default_value_t = ProfileArg::Exponential)]
        profile: ProfileArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset registry (TOML).
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// In-distribution dataset (test split).
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum EvalKind {
    /// Top-1 / top-5 accuracy.
    Accuracy {
        #[command(flatten)]
        common: EvalCommon,
    },
    /// AUROC against one or more out-of-distribution sets, plus confidence plots.
    Ood {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long = "ood", required = true)]
        ood: Vec<String>,
        #[arg(long, value_enum, default_value_t = ScoreArg::Kl)]
        score: ScoreArg,
        #[arg(long)]
        resize: bool,
    },
    /// Accuracy ratio under a transform.
    Affinity {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, value_enum)]
        transform: TransformArg,
        #[arg(long)]
        exclude_identity: bool,
    },
    /// Clean and PGD accuracy.
    Adversarial {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        epsilon: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Kl,
    MaxSoftmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Identity,
    Rotation,
    LorotI,
    LorotE,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Exponential,
    Step,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

impl TransformArg {
    fn variant(self) -> Option<Variant> {
        match self {
            TransformArg::Identity => None,
            TransformArg::Rotation => Some(Variant::GlobalRotation),
            TransformArg::LorotI => Some(Variant::LoRotI),
            TransformArg::LorotE => Some(Variant::LoRotE),
        }
    }

    fn name(self) -> &'static str {
        self.variant().map_or("identity", |v| v.name())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig { .. } | Error::ConfigParse(_) | Error::UnknownRecipe { .. } | Error::UnknownDataset(_)) => 2,
        Some(Error::CheckpointMismatch(_)) => 3,
        Some(Error::Locked(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, output, seeds } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = output {
                cfg.output_dir = out;
            }
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            let out = run_experiment(&cfg, &RunCache::new())?;
            print!("{}", out.report.render());
            for (run, sum) in &out.report.histories {
                println!("history {run} {sum}");
            }
            println!("report checksum {}", out.manifest.report_checksum);
            println!("wrote {}", out.dir.display());
        }
        Command::Sweep { config, lambdas, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.kind = ExperimentKind::LambdaSweep;
            cfg.lambdas = lambdas;
            if let Some(out) = output {
                cfg.output_dir = out;
            }
            let out = run_experiment(&cfg, &RunCache::new())?;
            print!("{}", out.report.render());
            println!("wrote {}", out.dir.display());
        }
        Command::Repro { recipe, scale, output } => {
            let scale = match scale {
                Scale::Desk => RecipeScale::desk(),
                Scale::Smoke => RecipeScale::smoke(),
            };
            let report = run_recipe(&recipe, &scale, &output, &RunCache::new())?;
            print!("{}", report.render());
            println!("report checksum {}", report.checksum());
        }
        Command::Eval { kind } => eval_command(kind)?,
        Command::Preview {
            data,
            transform,
            count,
            seed,
            output,
        } => preview(&data, transform, count, seed, &output)?,
        Command::BuildImbalanced {
            data,
            mu,
            profile,
            seed,
            output,
        } => {
            let reg = Registry::from_file(&data.registry)?;
            let d = reg.load(&data.dataset, data.split.into())?;
            let spec = ImbalanceSpec {
                mu,
                profile: match profile {
                    ProfileArg::Exponential => ImbalanceProfile::Exponential,
                    ProfileArg::Step => ImbalanceProfile::Step,
                },
            };
            let lt = build_imbalanced(&d, &spec, &mut rng::stream(seed, &[tag::SUBSAMPLE]))?;
            write_packed(&lt, &output)?;
            println!("class counts {:?}", lt.class_counts());
            println!("checksum {}", lt.checksum());
        }
    }
    Ok(())
}

fn load_for_eval(common: &EvalCommon) -> anyhow::Result<(DualHeadModel<f32>, String, Registry, lorot::data::LabeledDataset)> {
    let (model, meta) = load_checkpoint::<f32>(&common.checkpoint, None)?;
    let reg = Registry::from_file(&common.registry)?;
    let test = reg.load(&common.dataset, Split::Test)?;
    let spec = model.spec();
    if test.num_classes() != spec.num_classes {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} classes, dataset {} has {}",
            spec.num_classes,
            common.dataset,
            test.num_classes()
        ))
        .into());
    }
    let want = (spec.input.height, spec.input.width, spec.input.channels);
    if test.image_shape() != Some(want) {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint expects {:?} images, dataset {} has {:?}",
            want,
            common.dataset,
            test.image_shape()
        ))
        .into());
    }
    Ok((model, meta.config_hash, reg, test))
}

fn finish(report: &mut Report, dir: &Path) -> anyhow::Result<()> {
    report.summarize();
    report.write(dir)?;
    print!("{}", report.render());
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval_command(kind: EvalKind) -> anyhow::Result<()> {
    let common = match &kind {
        EvalKind::Accuracy { common }
        | EvalKind::Ood { common, .. }
        | EvalKind::Affinity { common, .. }
        | EvalKind::Adversarial { common, .. } => common,
    };
    let (model, hash, reg, test) = load_for_eval(common)?;
    std::fs::create_dir_all(&common.output).with_context(|| format!("creating {}", common.output.display()))?;
    let _lock = DirLock::acquire(&common.output)?;
    let mut report = Report::new(format!("eval-{}", common.dataset), hash, vec![common.seed]);
    let arm = common.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match &kind {
        EvalKind::Accuracy { .. } => {
            let acc = eval::accuracy(&model, &test)?;
            let mut m = vec![("accuracy".to_string(), acc.top1)];
            if let Some(t5) = acc.top5 {
                m.push(("top5".to_string(), t5));
            }
            report.push(arm, Some(common.seed), m);
        }
        EvalKind::Ood {
            ood, score, resize, ..
        } => {
            let kind = match *score {
                ScoreArg::Kl => ScoreKind::KlToUniform,
                ScoreArg::MaxSoftmax => ScoreKind::MaxSoftmax,
            };
            let rule = if *resize { ResizeRule::Bilinear } else { ResizeRule::Reject };
            let mut m = Vec::new();
            for name in ood {
                let out = reg.load(name, Split::Test)?;
                let pair = OodEvalPair::new(test.clone(), out, rule)?;
                let r = eval::ood_evaluate(&model, &pair, kind)?;
                m.push((format!("auroc_{name}"), r.auroc));
                report.raw.insert(format!("{name}/in_scores"), r.in_scores);
                report.raw.insert(format!("{name}/out_scores"), r.out_scores);
                let conf = eval::classwise_confidence(&model, &pair)?;
                for c in &conf.out_dist {
                    m.push((format!("confidence_{name}_{}", c.class), c.mean));
                }
                write_atomic(
                    &common.output.join(format!("confidence-{name}.svg")),
                    confidence_svg(&conf, &format!("{} vs {name}", common.dataset)).as_bytes(),
                )?;
            }
            report.push(arm, Some(common.seed), m);
        }
        EvalKind::Affinity {
            transform,
            exclude_identity,
            ..
        } => {
            let shift = match transform.variant() {
                None => ShiftTransform::Identity,
                Some(v) => ShiftTransform::Pretext {
                    task: PretextTask::new(v),
                    exclude_identity: *exclude_identity,
                },
            };
            let r = eval::affinity(&model, &test, &shift, common.seed)?;
            report.push(
                arm,
                Some(common.seed),
                [
                    ("clean_accuracy".to_string(), r.clean_accuracy),
                    ("shifted_accuracy".to_string(), r.shifted_accuracy),
                    (format!("affinity_{}", transform.name()), r.affinity),
                ],
            );
        }
        EvalKind::Adversarial { steps, epsilon, .. } => {
            let (steps, epsilon) = (*steps, *epsilon);
            if steps == 0 {
                bail!(Error::InvalidConfig {
                    field: "steps".into(),
                    reason: "must be at least 1".into()
                });
            }
            let adv = AdversarialConfig {
                epsilon,
                ..AdversarialConfig::default()
            };
            adv.validate()?;
            let r = eval::eval_adversarial(&model, &test, &adv, steps, common.seed)?;
            report.push(
                arm,
                Some(common.seed),
                [
                    ("clean_accuracy".to_string(), r.clean_accuracy),
                    (format!("robust_pgd{steps}"), r.robust_accuracy),
                    ("max_linf".to_string(), r.max_linf),
                ],
            );
        }
    }
    finish(&mut report, &common.output)
}

fn preview(data: &DataArgs, transform: TransformArg, count: usize, seed: u64, output: &Path) -> anyhow::Result<()> {
    let reg = Registry::from_file(&data.registry)?;
    let d = reg.load(&data.dataset, data.split.into())?;
    std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
    for (i, (img, y)) in d.samples().iter().take(count).enumerate() {
        let after: ImageTensor = match transform.variant() {
            None => img.clone(),
            Some(v) => {
                let mut r = rng::stream(seed, &[tag::TRANSFORM, i as u64]);
                let s = transform_sample(img, *y, &PretextTask::new(v), &mut r)?;
                println!(
                    "{i:04}: label {} patch x={} y={} side={}",
                    s.pretext_label.index(),
                    s.patch.top_x,
                    s.patch.top_y,
                    s.patch.side
                );
                s.image
            }
        };
        img.to_u8().save_png(&output.join(format!("{i:04}-before.png")))?;
        after.to_u8().save_png(&output.join(format!("{i:04}-after.png")))?;
    }
    println!("wrote {} pairs to {}", count.min(d.len()), output.display());
    Ok(())
}
