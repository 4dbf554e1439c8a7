use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmanet::eval::{emit_report, ReportFormat};
use mmanet::{
    evaluate_combinations, generate_dataset, pretrain_teacher, train_deployment, Checkpoint,
    DatasetSpec, Error, MiningReport, NetRole, Network, Result, TrainConfig,
};

const TEACHER_CKPT: &str = "teacher.json";
const TEACHER_LOG: &str = "teacher_log.jsonl";
const DEPLOYMENT_CKPT: &str = "deployment.json";
const TRAIN_LOG: &str = "train_log.jsonl";
const MINING_REPORT: &str = "mining_report.json";
const MINING_TEXT: &str = "mining_report.txt";

#[derive(Parser)]
#[command(
    name = "mmanet",
    version,
    about = "Incomplete multimodal training with teacher distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the complete-modality teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the deployment network against a teacher checkpoint.
    TrainDeployment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on every modality combination of the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report formats to write; all three by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        format: Vec<FormatArg>,
    },
    /// Print the mining report stored in a deployment run directory.
    MiningReport {
        #[arg(long)]
        log: PathBuf,
    },
    /// Write a dataset split as CSV.
    DumpDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Print a complete configuration for a named preset.
    PrintConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Plot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn output_dir(cfg: &TrainConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_net(path: &Path, role: NetRole) -> Result<Network> {
    let net = Network::from_checkpoint(&Checkpoint::load(path)?)?;
    if net.role() != role {
        return Err(Error::Contract(format!(
            "{} holds a {} network, expected {}",
            path.display(),
            net.role().as_str(),
            role.as_str()
        )));
    }
    Ok(net)
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = output_dir(&cfg, out)?;
            let data = generate_dataset::<f64>(&cfg.dataset)?;
            let (net, log) = pretrain_teacher(&cfg, &data)?;
            net.to_checkpoint()?.save(&dir.join(TEACHER_CKPT))?;
            log.save(&dir.join(TEACHER_LOG))?;
            if let Some(last) = log.records.last() {
                println!(
                    "teacher: {} epochs, final task loss {:.6}",
                    last.epoch, last.task_loss
                );
            }
            println!("wrote {}", dir.join(TEACHER_CKPT).display());
        }
        Command::TrainDeployment {
            config,
            teacher,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = output_dir(&cfg, out)?;
            let teacher = load_net(&teacher, NetRole::Teacher)?;
            let data = generate_dataset::<f64>(&cfg.dataset)?;
            let run = train_deployment(&cfg, &data, &teacher)?;
            run.net.to_checkpoint()?.save(&dir.join(DEPLOYMENT_CKPT))?;
            run.log.save(&dir.join(TRAIN_LOG))?;
            let report_json =
                serde_json::to_string_pretty(&run.mining_report).expect("report serializes");
            write(&dir.join(MINING_REPORT), &(report_json + "\n"))?;
            let text = run.mining_report.render_text();
            write(&dir.join(MINING_TEXT), &text)?;
            print!("{text}");
            println!("wrote {}", dir.join(DEPLOYMENT_CKPT).display());
        }
        Command::Evaluate {
            config,
            ckpt,
            out,
            format,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = output_dir(&cfg, out)?;
            let net = load_net(&ckpt, NetRole::Deployment)?;
            let data = generate_dataset::<f64>(&cfg.dataset)?;
            let evaluation =
                evaluate_combinations(&net, &data.test, &cfg.dataset.modality_names())?;
            let formats = if format.is_empty() {
                vec![FormatArg::Csv, FormatArg::Json, FormatArg::Plot]
            } else {
                format
            };
            for f in formats {
                let f = match f {
                    FormatArg::Csv => ReportFormat::Csv,
                    FormatArg::Json => ReportFormat::Json,
                    FormatArg::Plot => ReportFormat::Plot,
                };
                let path = emit_report(&evaluation.report, &evaluation.scores, f, &dir)?;
                log::info!("wrote {}", path.display());
            }
            print!("{}", evaluation.report.to_csv());
        }
        Command::MiningReport { log } => {
            let path = log.join(MINING_REPORT);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let report: MiningReport = serde_json::from_str(&text).map_err(|e| Error::Format {
                kind: "mining report",
                path: path.clone(),
                reason: e.to_string(),
            })?;
            print!("{}", report.render_text());
        }
        Command::DumpDataset { config, out, split } => {
            let cfg = TrainConfig::load(&config)?;
            let data = generate_dataset::<f64>(&cfg.dataset)?;
            match split {
                Split::Train => data.train.write_csv(&out)?,
                Split::Test => data.test.write_csv(&out)?,
            }
        }
        Command::PrintConfig { preset } => {
            let dataset = DatasetSpec {
                num_modalities: 3,
                num_classes: 2,
                samples_per_class: 300,
                feature_dim: 8,
                snr: vec![0.5, 2.5, 0.5],
                seed: 7,
                test_fraction: 0.3,
                modality_names: None,
            };
            print!("{}", TrainConfig::preset(&preset, dataset)?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
