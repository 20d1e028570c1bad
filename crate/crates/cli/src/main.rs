mod config;
mod error;
mod raster;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use error::CliError;
use hazeforge::autodiff::{op_suite, GradCheckConfig};
use hazeforge::committee::{
    committee_gradcheck, evaluate_model, input_baseline, load_trained, run_ablation, write_ablation, AblationConfig,
    AblationEvent, AblationMode, EpochSummary, Trainer, FINAL_STEM,
};
use hazeforge::eval::{evaluate_pairs, write_report, NiqeModel};
use hazeforge::model::dehaze_image;
use hazeforge::synth::{generate_dataset, read_dataset, write_dataset, Dataset};
use hazeforge::Image;
use raster::{collect_images, read_image, stem, write_depth, write_image, RasterKind};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "hazeforge", version, about = "Non-ideal haze synthesis, committee-trained dehazing, and image metrics")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (falls back to the config file, then HAZEFORGE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample synthesis and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired synthetic dataset.
    Synth(SynthArgs),
    /// Train one model with the two-phase schedule.
    Train(TrainArgs),
    /// Train and score every (mode, seed) combination.
    Ablate(AblateArgs),
    /// Dehaze images with a trained checkpoint (one forward pass each).
    Dehaze(DehazeArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Finite-difference check of every autodiff op and the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training samples.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Square image side.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    average_last_k: Option<usize>,
    #[arg(long)]
    teacher_noise: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of m1,m2,m3,m4.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<AblationMode>>,
    /// Number of seeds, counting up from the master seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct DehazeArgs {
    /// Directory holding the checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint file stem inside the directory.
    #[arg(long, default_value = FINAL_STEM)]
    stem: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write predicted beta/airlight (JSON) and depth (HZTR).
    #[arg(long)]
    sidecar: bool,
    /// Image files or directories (.hztr, .png).
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions: files or directories.
    #[arg(long = "pred")]
    pred: Vec<PathBuf>,
    /// Directory of references, matched by file stem.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Images to fit the NIQE model on; NIQE is skipped without it.
    #[arg(long)]
    niqe_corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Randomized trials per op.
    #[arg(long, default_value_t = 20)]
    trials: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        cfg.threads = t;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
        Command::Dehaze(a) => cmd_dehaze(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("missing --{flag} (or paths.{flag} in the config)")))
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs) -> Result<(), CliError> {
    if let Some(n) = a.count {
        if n == 0 {
            return Err(CliError::Config("--count must be >= 1".into()));
        }
        cfg.dataset.train_count = n;
    }
    if let Some(n) = a.test_count {
        cfg.dataset.test_count = n;
    }
    if let Some(s) = a.size {
        cfg.dataset.height = s;
        cfg.dataset.width = s;
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    cfg.dataset.validate()?;
    let ds = generate_dataset(&cfg.dataset, cfg.threads)?;
    write_dataset(&ds, &out)?;
    cfg.write_to(&out)?;
    let r = &cfg.dataset.ranges;
    println!(
        "wrote {} samples ({} train, {} test, {}x{}) to {}",
        ds.samples.len(),
        ds.train().len(),
        ds.test().len(),
        cfg.dataset.height,
        cfg.dataset.width,
        out.display()
    );
    println!(
        "ranges: beta_clean [{}, {}], beta_synth [{}, {}], airlight [{}, {}], depth [{}, {}]",
        r.beta_clean.0, r.beta_clean.1, r.beta_synth.0, r.beta_synth.1, r.airlight.0, r.airlight.1, r.depth.0, r.depth.1
    );
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.phase1_epochs {
        t.phase1_epochs = v;
    }
    if let Some(v) = o.phase2_epochs {
        t.phase2_epochs = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = o.average_last_k {
        t.average_last_k = v;
    }
    if let Some(v) = o.teacher_noise {
        t.teacher_noise = v;
    }
    if let Some(v) = o.base_channels {
        t.network.base_channels = v;
    }
}

fn load_data(cfg: &RunConfig, data: Option<PathBuf>) -> Result<(PathBuf, Dataset), CliError> {
    let dir = required(data, &cfg.paths.data, "data")?;
    let ds = read_dataset(&dir)?;
    if ds.train().is_empty() {
        return Err(CliError::Config(format!("{} has no training samples", dir.display())));
    }
    Ok((dir, ds))
}

fn fmt_term(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

fn progress_line(prefix: &str, total: usize, s: &EpochSummary) -> String {
    format!(
        "{prefix}epoch {}/{total} {} L_sc={:.6} L_cc={} L_dc={} L_is={} total={:.6}",
        s.epoch,
        s.phase,
        s.mean.sc,
        fmt_term(s.mean.cc),
        fmt_term(s.mean.dc),
        fmt_term(s.mean.is),
        s.mean_total
    )
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    apply_overrides(&mut cfg, &a.overrides);
    let (data, ds) = load_data(&cfg, a.data)?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.data = Some(data);
    cfg.paths.out = Some(out.clone());
    cfg.train.validate()?;
    cfg.write_to(&out)?;

    let total = cfg.train.total_epochs();
    let mut trainer = Trainer::new(cfg.train.clone(), ds.train())?.with_output(&out)?;
    trainer.run_until(total, |s| println!("{}", progress_line("", total, s)))?;
    let outcome = trainer.finish()?;
    println!(
        "final weights: mean of epochs {:?} -> {}",
        outcome.averaged_epochs,
        out.join(format!("{FINAL_STEM}.json")).display()
    );
    let test = ds.test();
    if !test.is_empty() {
        let score = evaluate_model(&outcome.net, &outcome.params, &test)?;
        let (p0, s0) = input_baseline(&test)?;
        println!(
            "test ({} samples): PSNR {:.3} dB, SSIM {:.4} (hazy input: {p0:.3} dB, {s0:.4})",
            test.len(),
            score.psnr,
            score.ssim
        );
        let path = out.join("test_score.json");
        fs::write(&path, serde_json::to_string_pretty(&score).expect("serializes")).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn cmd_ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<(), CliError> {
    if let Some(m) = a.modes {
        cfg.ablation.modes = m;
    }
    if let Some(n) = a.seeds {
        cfg.ablation.seeds = n;
    }
    apply_overrides(&mut cfg, &a.overrides);
    let (data, ds) = load_data(&cfg, a.data)?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.data = Some(data);
    cfg.paths.out = Some(out.clone());
    let acfg = AblationConfig {
        modes: cfg.ablation.modes.clone(),
        seeds: cfg.ablation_seeds(),
        train: cfg.train.clone(),
    };
    acfg.validate()?;
    cfg.write_to(&out)?;
    let total = cfg.train.total_epochs();
    let table = run_ablation(&acfg, &ds, |e| match e {
        AblationEvent::Epoch { seed, modes, summary } => {
            let names: Vec<String> = modes.iter().map(|m| m.to_string()).collect();
            println!("{}", progress_line(&format!("[seed {seed} {}] ", names.join(",")), total, summary));
        }
        AblationEvent::Finished(r) => println!(
            "[seed {} {}] test PSNR {:.3} dB, SSIM {:.4}",
            r.seed, r.mode, r.score.psnr, r.score.ssim
        ),
    })?;
    write_ablation(&table, &out)?;
    print!("{}", table.to_table());
    Ok(())
}

fn cmd_dehaze(mut cfg: RunConfig, a: DehazeArgs) -> Result<(), CliError> {
    let ckpt = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let inputs = if a.inputs.is_empty() { cfg.paths.inputs.clone() } else { a.inputs };
    if inputs.is_empty() {
        return Err(CliError::Config("no input images given".into()));
    }
    let files = collect_images(&inputs)?;
    if files.is_empty() {
        return Err(CliError::Config("inputs contain no .hztr or .png images".into()));
    }
    let (net, store, _) = load_trained(&ckpt, &a.stem)?;
    cfg.paths.checkpoint = Some(ckpt);
    cfg.paths.inputs = inputs;
    cfg.paths.out = Some(out.clone());
    cfg.write_to(&out)?;
    for f in &files {
        let img = read_image(f)?;
        let d = dehaze_image(&net, &store, &img)?;
        let kind = RasterKind::of(f).expect("collected rasters have a known type");
        let name = stem(f);
        let target = out.join(format!("{name}.{}", kind.extension()));
        write_image(&target, &d.clean)?;
        if a.sidecar {
            let meta = serde_json::json!({ "beta": d.beta, "airlight": d.airlight });
            let p = out.join(format!("{name}.params.json"));
            fs::write(&p, serde_json::to_string_pretty(&meta).expect("serializes")).map_err(|e| CliError::io(&p, e))?;
            write_depth(&out.join(format!("{name}.depth.hztr")), &d.depth)?;
        }
        println!(
            "{} -> {} (beta {:.4}, airlight [{:.3}, {:.3}, {:.3}])",
            f.display(),
            target.display(),
            d.beta,
            d.airlight[0],
            d.airlight[1],
            d.airlight[2]
        );
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let pred = if a.pred.is_empty() { cfg.paths.inputs.clone() } else { a.pred };
    let reference = required(a.reference, &cfg.paths.reference, "ref")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    if pred.is_empty() {
        return Err(CliError::Config("missing --pred".into()));
    }
    let refs: BTreeMap<String, PathBuf> = collect_images(&[reference.clone()])?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let mut loaded: Vec<(String, Image, Image)> = Vec::new();
    for p in collect_images(&pred)? {
        let name = stem(&p);
        let r = refs
            .get(&name)
            .ok_or_else(|| CliError::Config(format!("no reference named {name} in {}", reference.display())))?;
        loaded.push((name, read_image(&p)?, read_image(r)?));
    }
    if loaded.is_empty() {
        return Err(CliError::Config("no predictions found".into()));
    }
    let corpus_dir = a.niqe_corpus.or_else(|| cfg.paths.niqe_corpus.clone());
    let niqe = match &corpus_dir {
        Some(dir) => {
            let imgs = collect_images(std::slice::from_ref(dir))?
                .iter()
                .map(|p| read_image(p))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Image> = imgs.iter().collect();
            Some(NiqeModel::fit(&refs, cfg.niqe)?)
        }
        None => None,
    };
    let pairs: Vec<(String, &Image, &Image)> = loaded.iter().map(|(n, p, r)| (n.clone(), p, r)).collect();
    let report = evaluate_pairs(&pairs, niqe.as_ref(), cfg.threads)?;
    cfg.paths.inputs = pred;
    cfg.paths.reference = Some(reference);
    cfg.paths.niqe_corpus = corpus_dir;
    cfg.paths.out = Some(out.clone());
    write_report(&report, &out)?;
    cfg.write_to(&out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut worst: f64 = 0.0;
    for c in op_suite(a.trials, 1e-5)? {
        println!(
            "{:<18} trials {:>3} checked {:>5} excluded {:>3} max rel err {:.3e}",
            c.op, c.trials, c.checked, c.excluded, c.max_rel_error
        );
        worst = worst.max(c.max_rel_error);
    }
    let full = committee_gradcheck(
        2,
        8,
        GradCheckConfig {
            samples_per_param: 6,
            ..Default::default()
        },
    )?;
    println!(
        "{:<18} batch 2x3x8x8 checked {:>5} excluded {:>3} max rel err {:.3e}",
        "committee", full.checked, full.excluded, full.max_rel_error
    );
    worst = worst.max(full.max_rel_error);
    println!("max rel err {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if worst <= a.tolerance {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max rel err {worst:.3e} > {:.1e}",
            a.tolerance
        )))
    }
}
