use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use densefix::data::{gen_shapes_dataset, generate_scenario, AnnotationManifest, Dataset, ScenarioKind};
use densefix::engine::{self, evaluate, read_metrics, report_csv, report_table, ApProtocol, RunConfig, METRICS_FILE};
use densefix::model::Checkpoint;

#[derive(Parser)]
#[command(name = "densefix", version, about = "Semi-supervised multi-task training with dense consistency")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a partial-annotation manifest for a dataset.
    MakeScenario {
        /// Dataset root holding manifest.txt.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Scenario kind, a to e.
        #[arg(long)]
        kind: ScenarioKind,
        #[arg(long)]
        seg: usize,
        #[arg(long)]
        det: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; defaults to a name derived from the arguments inside the dataset root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a config file. Any config key can follow as `--key value`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Use the student instead of the teacher weights.
        #[arg(long)]
        student: bool,
        /// `coco` (IoU 0.50:0.95) or `single` (IoU 0.5).
        #[arg(long, default_value = "coco")]
        ap_protocol: String,
    },
    /// Per-class table of the best evaluation and a CSV of all evaluations.
    Report {
        /// Run directory or metrics file.
        path: PathBuf,
        /// CSV destination; defaults to metrics.csv next to the records.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            bail!("expected `--key value`, got {a:?}");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("missing value for --{key}"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn ap_protocol(s: &str) -> Result<ApProtocol> {
    match s {
        "coco" => Ok(ApProtocol::Coco),
        "single" => Ok(ApProtocol::Single),
        _ => bail!("unknown AP protocol {s:?}"),
    }
}

fn train(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config, &parse_overrides(overrides)?)?;
    let (train, eval) = engine::load_datasets(&cfg)?;
    eprintln!(
        "training {} on {} samples ({} eval), {} steps",
        cfg.method.name(),
        train.len(),
        eval.len(),
        cfg.total_steps
    );
    let start = Instant::now();
    let every = cfg.log_every;
    let mut hook = |step: u64, r: &engine::StepReport| {
        if step % every == 0 {
            let l = &r.loss;
            eprintln!(
                "step {step:>6}  loss {:.4}  seg {:.4}/{:.4}  det {:.4}/{:.4}  lr {:.2e}  {:.1}s",
                l.total,
                l.tasks[0].terms.supervised,
                l.tasks[0].terms.unsupervised,
                l.tasks[1].terms.supervised,
                l.tasks[1].terms.unsupervised,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    };
    let summary = engine::run(&cfg, &train, &eval, Some(&mut hook))?;
    for r in &summary.history {
        eprintln!("eval step {:>6}  mIoU {:.4}  mAP {:.4}  gmean {:.4}", r.step, r.miou, r.map, r.gmean);
    }
    let best = summary.best_record();
    println!("best step {} mIoU {:.4} mAP {:.4} gmean {:.4}", best.step, best.miou, best.map, best.gmean);
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, manifest: Option<&Path>, student: bool, ap: &str) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg_text = ck
        .meta
        .get("config")
        .and_then(|v| v.as_str())
        .context("checkpoint carries no run configuration")?;
    let cfg = RunConfig::parse(cfg_text)?;
    ck.student.check_spec(&cfg.net)?;
    let ds = Dataset::load(data, manifest)?;
    let params = if student { &ck.student } else { ck.teacher.params() };
    let res = evaluate(&cfg.net, params, &ds, cfg.nms_iou, cfg.max_dets, ap_protocol(ap)?)?;
    let rec = res.record(ck.step);
    print!("{}", report_table(std::slice::from_ref(&rec)).unwrap_or_default());
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn report(path: &Path, csv: Option<&Path>) -> Result<()> {
    let metrics = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let history = read_metrics(&metrics)?;
    let table = report_table(&history).context("no evaluation records")?;
    print!("{table}");
    let csv_path = csv.map_or_else(|| metrics.with_extension("csv"), Path::to_path_buf);
    fs::write(&csv_path, report_csv(&history)).with_context(|| format!("writing {}", csv_path.display()))?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { n, side, seed, out } => gen_shapes_dataset(n, side, seed, &out).map(|m| {
            println!("wrote {} samples to {}", m.len(), out.display());
        }).map_err(Into::into),
        Cmd::MakeScenario { data, kind, seg, det, seed, out } => (|| -> Result<()> {
            let base = AnnotationManifest::load(&data.join("manifest.txt"))?;
            let m = generate_scenario(base.ids, kind, seg, det, seed)?;
            let out = out.unwrap_or_else(|| data.join(format!("scenario_{kind}_{seg}_{det}_s{seed}.txt")));
            m.save(&out)?;
            println!("wrote {} (seg {}, det {}, overlap {})", out.display(), m.count(densefix::losses::Task::Segmentation), m.count(densefix::losses::Task::Detection), m.overlap());
            Ok(())
        })(),
        Cmd::Train { config, overrides } => train(&config, &overrides),
        Cmd::Eval { checkpoint, data, manifest, student, ap_protocol } => {
            eval(&checkpoint, &data, manifest.as_deref(), student, &ap_protocol)
        }
        Cmd::Report { path, csv } => report(&path, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
