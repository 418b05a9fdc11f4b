use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use lamward::checkpoint::{load_bundle, load_bundle_checked, save_bundle};
use lamward::codec::write_atomic;
use lamward::config::RunConfig;
use lamward::controller::{train_controller, Controller, ControllerData};
use lamward::episode_io::{decode_dataset, encode_dataset};
use lamward::evalsuite::{eval_capacity, eval_cycle, eval_leakage, EvalReport};
use lamward::lam::{train_until, LossReport, ModelBundle};
use lamward::planner::{plan_episodes, PlanSummary};
use lamward::rng::Rng;
use lamward::sampler::{draw_latents, predict_with_samples, SampleDump, SampleFamily};
use lamward::worldgen::{make_dataset, Episode};

const TOOL: &str = concat!("lamward ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "lamward", version, about = "Latent-action world models on synthetic sprite videos")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory written by gen-data; defaults to `<out>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training and evaluation episode sets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a latent action world model, or resume one.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint; its config digest must match.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop once this many steps are done (the schedule still spans the configured steps).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Fit a controller mapping true actions onto a frozen bundle's latents.
    TrainController {
        #[command(flatten)]
        common: Common,
        /// Frozen bundle; defaults to `<out>/bundle.lwck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an evaluation protocol over one or more checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["capacity", "leakage", "cycle"])]
        protocol: String,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Goal-conditioned CEM planning on held-out episodes.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        controller: Option<PathBuf>,
        #[arg(long, default_value = "manip", value_parser = ["manip", "nav"])]
        preset: String,
    },
    /// Draw latent actions without an IDM.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["sgld", "prior", "codebook"])]
        family: String,
        /// Overrides `sample.n`.
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileEntry {
    sha256: String,
    bytes: usize,
    command: String,
    config_digest: String,
    seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    files: BTreeMap<String, FileEntry>,
}

/// Resolved run: config, its digest, and where artifacts go.
struct Run {
    cfg: RunConfig,
    digest: String,
    out: PathBuf,
    data: PathBuf,
    command: &'static str,
    written: Vec<(String, FileEntry)>,
}

impl Run {
    fn open(common: &Common, command: &'static str) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg = cfg.with_seed(s);
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let data = common.data.clone().unwrap_or_else(|| out.join("data"));
        Ok(Self {
            digest: cfg.digest(),
            cfg,
            out,
            data,
            command,
            written: Vec::new(),
        })
    }

    fn stamp(&self) -> Value {
        json!({ "tool": TOOL, "config_digest": self.digest, "seed": self.cfg.seed })
    }

    fn csv_stamp(&self) -> String {
        format!("# {TOOL} digest={} seed={}\n", self.digest, self.cfg.seed)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel, bytes);
        Ok(path)
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.written.push((
            rel.to_string(),
            FileEntry {
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len(),
                command: self.command.to_string(),
                config_digest: self.digest.clone(),
                seed: self.cfg.seed,
            },
        ));
    }

    fn write_json(&mut self, rel: &str, body: Value) -> Result<PathBuf> {
        let mut doc = self.stamp();
        doc.as_object_mut().expect("stamp is an object").extend(match body {
            Value::Object(m) => m,
            other => [("value".to_string(), other)].into_iter().collect(),
        });
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn write_csv(&mut self, rel: &str, body: &str) -> Result<PathBuf> {
        let text = format!("{}{body}", self.csv_stamp());
        self.write(rel, text.as_bytes())
    }

    /// Merge this command's files into `<out>/manifest.json`.
    fn finish(self) -> Result<()> {
        let path = self.out.join("manifest.json");
        let mut manifest: Manifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        manifest.tool = TOOL.to_string();
        manifest.files.extend(self.written);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(())
    }

    fn load_episodes(&self, name: &str) -> Result<Vec<Episode>> {
        let path = self.data.join(name);
        let bytes = std::fs::read(&path)
            .with_context(|| format!("reading {}; run gen-data first", path.display()))?;
        Ok(decode_dataset(&bytes).with_context(|| format!("decoding {}", path.display()))?)
    }

    fn bundle_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("bundle.lwck"))
    }
}

fn gen_data(common: Common) -> Result<()> {
    let mut run = Run::open(&common, "gen-data")?;
    let cfg = &run.cfg;
    let train = make_dataset(&cfg.world, cfg.train_data_seed(), cfg.data.train_episodes)?;
    let eval = make_dataset(&cfg.world, cfg.eval_data_seed(), cfg.data.eval_episodes)?;
    let (nt, ne) = (train.len(), eval.len());
    let data_rel = |name: &str, run: &Run| -> Result<String> {
        let rel = run.data.join(name);
        Ok(rel
            .strip_prefix(&run.out)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| rel.to_string_lossy().into_owned()))
    };
    for (name, eps) in [("train.lwds", &train), ("eval.lwds", &eval)] {
        let bytes = encode_dataset(eps);
        let path = run.data.join(name);
        write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        let rel = data_rel(name, &run)?;
        run.record(&rel, &bytes);
    }
    let world = serde_json::to_value(&run.cfg.world)?;
    run.write_json(
        "data_manifest.json",
        json!({ "train_episodes": nt, "eval_episodes": ne, "world": world }),
    )?;
    eprintln!("generated {nt} training and {ne} evaluation episodes");
    run.finish()
}

fn train_cmd(common: Common, checkpoint: Option<PathBuf>, until: Option<u64>) -> Result<()> {
    let mut run = Run::open(&common, "train")?;
    let episodes = run.load_episodes("train.lwds")?;
    let input_dim = run.cfg.world.pixels();
    let mut bundle = match &checkpoint {
        Some(p) => load_bundle_checked(p, &run.digest)
            .with_context(|| format!("resuming from {}", p.display()))?,
        None => {
            let mut b = ModelBundle::new(run.cfg.lam_config(), input_dim)?;
            b.digest = run.digest.clone();
            b
        }
    };
    let start = bundle.step;
    let total = bundle.cfg.train.steps;
    let until = until.unwrap_or(total);
    let log_every = (total / 20).max(1);
    let reports = train_until(&mut bundle, &episodes, until, |r: &LossReport| {
        if r.step % log_every == 0 || r.step + 1 == total {
            eprintln!("step {:>6} total {:.5} pred {:.5} reg {:.5}", r.step, r.total, r.pred, r.reg);
        }
        Ok(())
    })?;

    let csv_path = run.out.join("train_loss.csv");
    let mut rows = String::new();
    if start > 0 {
        if let Ok(prev) = std::fs::read_to_string(&csv_path) {
            for line in prev.lines().skip(2) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < start) {
                    rows.push_str(line);
                    rows.push('\n');
                }
            }
        }
    }
    for r in &reports {
        rows.push_str(&r.csv_row());
        rows.push('\n');
    }
    let body = format!("{}\n{rows}", LossReport::CSV_HEADER);
    run.write_csv("train_loss.csv", &body)?;

    let path = run.out.join("bundle.lwck");
    save_bundle(&path, &bundle)?;
    let bytes = std::fs::read(&path)?;
    run.record("bundle.lwck", &bytes);
    eprintln!("trained {} to step {} -> {}", bundle.cfg.reg.label(), bundle.step, path.display());
    run.finish()
}

fn train_controller_cmd(common: Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut run = Run::open(&common, "train-controller")?;
    let bundle = load_bundle(&run.bundle_path(&checkpoint))?;
    let episodes = run.load_episodes("train.lwds")?;
    let action_dim = episodes.first().map_or(0, |e| e.cfg.action_dim());
    let data = ControllerData::from_episodes(&bundle, &episodes)?;
    let mut ctl = Controller::for_bundle(run.cfg.controller_config(), &bundle, action_dim)?;
    ctl.digest = run.digest.clone();
    let total = ctl.cfg.steps;
    let log_every = (total / 10).max(1);
    let losses = train_controller(&mut ctl, &data, |step, loss| {
        if step % log_every == 0 {
            eprintln!("controller step {step:>6} mse {loss:.6}");
        }
        Ok(())
    })?;
    let mut body = String::from("step,mse\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(body, "{i},{l:?}");
    }
    run.write_csv("controller_loss.csv", &body)?;
    let path = run.out.join("controller.lwck");
    ctl.save(&path)?;
    run.record("controller.lwck", &std::fs::read(&path)?);
    eprintln!("controller mse {:.6} -> {}", ctl.mse(&data)?, path.display());
    run.finish()
}

fn emit_report(run: &mut Run, report: &EvalReport) -> Result<()> {
    let p = &report.protocol;
    let body = serde_json::to_value(report)?;
    run.write_json(&format!("eval_{p}.json"), json!({ "report": body }))?;
    run.write_csv(&format!("eval_{p}.csv"), &report.to_csv())?;
    run.write_csv(&format!("eval_{p}_plot.csv"), &report.plot_data())?;
    for (i, row) in report.rows.iter().enumerate() {
        let metrics: Vec<String> = row.metrics.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
        eprintln!("[{i}] {} {}", row.label, metrics.join(" "));
    }
    Ok(())
}

fn eval_cmd(common: Common, protocol: String, checkpoints: Vec<PathBuf>) -> Result<()> {
    let mut run = Run::open(&common, "eval")?;
    let episodes = run.load_episodes("eval.lwds")?;
    let bundles: Vec<ModelBundle> = checkpoints
        .iter()
        .map(|p| load_bundle(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;
    let seed = run.cfg.sub_seed("eval");
    let e = run.cfg.eval.clone();
    let report = match protocol.as_str() {
        "capacity" => {
            let refs: Vec<&ModelBundle> = bundles.iter().collect();
            eval_capacity(&refs, &episodes, e.context)?
        }
        "leakage" | "cycle" => {
            let mut merged: Option<EvalReport> = None;
            for b in &bundles {
                let r = if protocol == "leakage" {
                    eval_leakage(b, &episodes, (e.cut > 0).then_some(e.cut), e.pairs, seed)?
                } else {
                    eval_cycle(b, &episodes, e.pairs, (e.cycle_horizon > 0).then_some(e.cycle_horizon), seed)?
                };
                match &mut merged {
                    Some(m) => m.rows.extend(r.rows),
                    None => merged = Some(r),
                }
            }
            merged.expect("at least one checkpoint")
        }
        other => bail!("unknown protocol {other}"),
    };
    emit_report(&mut run, &report)?;
    run.finish()
}

fn plan_cmd(common: Common, checkpoint: Option<PathBuf>, controller: Option<PathBuf>, preset: String) -> Result<()> {
    let mut run = Run::open(&common, "plan")?;
    let bundle = load_bundle(&run.bundle_path(&checkpoint))?;
    let ctl_path = controller.unwrap_or_else(|| run.out.join("controller.lwck"));
    if !ctl_path.exists() {
        bail!("controller checkpoint {} not found; run train-controller first", ctl_path.display());
    }
    let ctl = Controller::load(&ctl_path)?;
    let cem = run.cfg.cem(&preset)?;
    let mut episodes = run.load_episodes("eval.lwds")?;
    let n = run.cfg.plan.episodes;
    if episodes.len() < n {
        bail!("plan.episodes = {n} but only {} evaluation episodes exist", episodes.len());
    }
    episodes.truncate(n);
    let plans = plan_episodes(&episodes, &cem, &bundle, &ctl, run.cfg.sub_seed("plan"))?;
    for p in &plans {
        run.write_json(&format!("plan/episode_{:04}.json", p.episode), json!({ "preset": preset, "record": serde_json::to_value(p)? }))?;
    }
    let summary = PlanSummary::of(&plans);
    run.write_json(
        "plan_summary.json",
        json!({ "preset": preset, "cem": serde_json::to_value(&cem)?, "summary": serde_json::to_value(&summary)? }),
    )?;
    let mut csv = String::from("policy,episodes,delta_xyz,ate,rpe\n");
    for (name, m) in [("cem", &summary.planned), ("random", &summary.random)] {
        let _ = writeln!(csv, "{name},{},{:?},{:?},{:?}", summary.episodes, m.delta_xyz, m.ate, m.rpe);
    }
    run.write_csv("plan_summary.csv", &csv)?;
    eprintln!(
        "{} episodes: cem delta_xyz {:.4} ate {:.4} rpe {:.4} | random delta_xyz {:.4}",
        summary.episodes, summary.planned.delta_xyz, summary.planned.ate, summary.planned.rpe, summary.random.delta_xyz
    );
    run.finish()
}

fn sample_cmd(common: Common, checkpoint: Option<PathBuf>, family: String, n: Option<usize>) -> Result<()> {
    let mut run = Run::open(&common, "sample")?;
    let bundle = load_bundle(&run.bundle_path(&checkpoint))?;
    let family = SampleFamily::parse(&family)?;
    let n = n.unwrap_or(run.cfg.sample.n);
    let seed = run.cfg.sub_seed("sample");
    let rng = Rng::new(seed, &format!("sample/{}", family.name()));
    let samples = draw_latents(&bundle, family, n, &run.cfg.sample.sgld, run.cfg.sample.used_only, &rng)?;

    let mut stats = serde_json::Map::new();
    stats.insert("family".into(), json!(family.name()));
    stats.insert("rows".into(), json!(samples.rows()));
    if let Ok(eval) = run.load_episodes("eval.lwds") {
        let seqs = eval
            .iter()
            .take(32)
            .map(|ep| bundle.encoder.encode_episode(ep))
            .collect::<lamward::Result<Vec<_>>>()?;
        if samples.rows() > 0 {
            let pred = predict_with_samples(&bundle, &samples, &seqs)?;
            stats.insert("predictions_finite".into(), json!(pred.data().iter().all(|v| v.is_finite())));
        }
        let mut inferred = Vec::new();
        for s in &seqs {
            let z = bundle.sequence_latents(s)?;
            inferred.extend((0..z.rows()).map(|i| z.row(i).to_vec()));
        }
        inferred.truncate(samples.rows());
        if inferred.len() >= 2 && samples.rows() >= 2 {
            let idm = lamward::tensor::Tensor::from_rows(&inferred)?;
            let acc = lamward::sampler::separability(&samples, &idm)?;
            stats.insert("separability".into(), json!(acc));
        }
    }

    let dump = SampleDump {
        digest: run.digest.clone(),
        family: family.name().to_string(),
        seed,
        samples,
    };
    let stem = format!("samples_{}", family.name());
    run.write(&format!("{stem}.lwsd"), &dump.encode())?;
    run.write(&format!("{stem}.csv"), dump.to_csv().as_bytes())?;
    run.write_json(&format!("{stem}_summary.json"), Value::Object(stats))?;
    eprintln!("wrote {} {} samples", dump.samples.rows(), family.name());
    run.finish()
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LAMWARD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LAMWARD_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.cmd {
        Cmd::GenData { common } => gen_data(common),
        Cmd::Train { common, checkpoint, until } => train_cmd(common, checkpoint, until),
        Cmd::TrainController { common, checkpoint } => train_controller_cmd(common, checkpoint),
        Cmd::Eval { common, protocol, checkpoint } => eval_cmd(common, protocol, checkpoint),
        Cmd::Plan { common, checkpoint, controller, preset } => plan_cmd(common, checkpoint, controller, preset),
        Cmd::Sample { common, checkpoint, family, n } => sample_cmd(common, checkpoint, family, n),
    }
}

