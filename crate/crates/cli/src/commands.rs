use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use lightcrl::checkpoint::{summarize, Checkpoint, CheckpointFile};
use lightcrl::data::{
    load_embeddings, read_jsonl, save_embeddings, write_jsonl, SplitTag, SyntheticSpec,
    SyntheticWorld,
};
use lightcrl::eval::{
    retrieval_recall_at_k, train_linear_probe, zero_shot_classify, ClassPrototypeSet,
};
use lightcrl::gradcheck::FdConfig;
use lightcrl::model::init_parameters;
use lightcrl::rng::Rng;
use lightcrl::train::{finetune, gradient_check, validation_loss, EpochRecord, HeadConfig};
use lightcrl::{
    DfeParameters, EvalReport, FusionKind, ModelConfig, PairedEmbeddingSet, Real, Tensor,
    TrainConfig, Trainer,
};

use crate::args::*;
use crate::manifest::RunManifest;
use crate::{CliError, CliResult, EXIT_CHECK_FAILED, EXIT_OK};

/// Largest `d_model` accepted by `gradcheck`.
pub const GRADCHECK_MAX_D_MODEL: usize = 16;

pub fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Gensynth(a) => gensynth(a),
        Command::Train(a) => match a.common.precision {
            Some(64) => train::<f64>(a),
            Some(32) => train::<f32>(a),
            _ => match &a.resume {
                Some(p) if read_checkpoint(p)?.meta()?.precision == 64 => train::<f64>(a),
                _ => train::<f32>(a),
            },
        },
        Command::Eval(a) => {
            let file = read_checkpoint(&a.checkpoint)?;
            match a.precision.unwrap_or(file.meta()?.precision) {
                64 => eval::<f64>(a, &file),
                _ => eval::<f32>(a, &file),
            }
        }
        Command::Gradcheck(a) => match a.precision {
            64 => gradcheck::<f64>(a),
            _ => gradcheck::<f32>(a),
        },
        Command::Inspect(a) => inspect(a),
        Command::Convert(a) => convert(a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

/// Attaches `path` to errors from reading or writing it.
fn at(path: &Path) -> impl Fn(lightcrl::Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    }
}

fn load(path: &Path) -> CliResult<PairedEmbeddingSet> {
    load_embeddings(path).map_err(at(path))
}

fn read_checkpoint(path: &Path) -> CliResult<CheckpointFile> {
    CheckpointFile::read(path).map_err(at(path))
}

fn split_name(s: SplitTag) -> &'static str {
    match s {
        SplitTag::Train => "train",
        SplitTag::Val => "val",
        SplitTag::Test => "test",
    }
}

// -------------------------------------------------------------------
// gensynth

fn gensynth(a: GensynthArgs) -> CliResult<i32> {
    let spec = SyntheticSpec {
        n: a.n,
        d_latent: a.d_latent,
        d1: a.d1,
        d2: a.d2,
        noise_sigma: a.noise_sigma,
        num_classes: a.classes,
        seed: a.seed,
        class_spread: a.class_spread,
    };
    spec.validate()?;
    for w in spec.warnings() {
        eprintln!("warning: {w}");
    }
    let split = SplitTag::from(a.split);
    create_dir(&a.out_dir)?;
    let out = a
        .out
        .unwrap_or_else(|| a.out_dir.join(format!("synth_{}.lce", split_name(split))));
    let protos = out.with_file_name("prototypes.lce");
    let manifest_path = out.with_extension("manifest.json");

    let world = SyntheticWorld::new(&spec)?;
    let set = world.sample(spec.n, split)?;
    save_embeddings(&set, &out)?;
    save_embeddings(&world.prototypes(), &protos)?;

    let config = serde_json::json!({ "spec": spec, "split": split });
    let mut manifest = RunManifest::new("gensynth", a.seed, config, vec![out.clone(), protos.clone()]);
    manifest.finish(&manifest_path)?;
    println!(
        "wrote {} {} pairs (d1={}, d2={}) to {}; class prototypes to {}",
        set.n(),
        split_name(split),
        set.d1(),
        set.d2(),
        out.display(),
        protos.display()
    );
    Ok(EXIT_OK)
}

// -------------------------------------------------------------------
// train

struct TrainOutputs {
    manifest: PathBuf,
    best: PathBuf,
    last: PathBuf,
    history: PathBuf,
}

impl TrainOutputs {
    fn new(dir: &Path) -> Self {
        TrainOutputs {
            manifest: dir.join("manifest.json"),
            best: dir.join("best.lck"),
            last: dir.join("last.lck"),
            history: dir.join("history.jsonl"),
        }
    }
}

fn best_checkpoint<F: Real>(t: &Trainer<F>) -> Checkpoint<F> {
    Checkpoint {
        train: Some(t.config.clone()),
        best_val: t.best_val,
        epoch: t.epoch,
        history: t.history.clone(),
        ..Checkpoint::from_params(t.best.clone())
    }
}

fn history_line(r: &EpochRecord) -> String {
    serde_json::to_string(r).expect("record serializes")
}

fn save_state<F: Real>(t: &Trainer<F>, out: &TrainOutputs) -> CliResult<()> {
    std::fs::write(&out.best, best_checkpoint(t).to_bytes())?;
    std::fs::write(&out.last, Checkpoint::from_trainer(t).to_bytes())?;
    Ok(())
}

fn train<F: Real>(a: TrainArgs) -> CliResult<i32> {
    let data = load(&a.data)?;
    let model = ModelConfig {
        d1: data.d1(),
        d2: data.d2(),
        d_ctx: a.d_ctx,
        d_model: a.d_model,
        d_out: a.d_out,
        fusion: a.fusion.into(),
    };
    model.validate()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::<F>::from_file(&read_checkpoint(path)?, None)?;
            let mut t = ckpt.into_trainer()?;
            t.config.max_epochs = a.max_epochs;
            t.stopped = false;
            t
        }
        None => {
            let config = TrainConfig {
                batch_k: a.batch_k,
                max_epochs: a.max_epochs,
                patience: a.patience,
                lr: a.lr,
                seed: a.common.seed,
                val_fraction: a.val_fraction,
                precision: F::BITS,
                max_grad_norm: a.max_grad_norm,
                ..TrainConfig::default()
            };
            Trainer::new(init_parameters::<F>(&model, a.common.seed)?, config)
        }
    };
    // A resumed run keeps the split it started with.
    let (train, val) = match &a.val_data {
        Some(p) => (data, load(p)?),
        None => data.split_validation(trainer.config.val_fraction, trainer.config.seed)?,
    };
    trainer.config.validate(train.n())?;
    if train.d1() != trainer.params.config.d1 || train.d2() != trainer.params.config.d2 {
        return Err(CliError::usage(format!(
            "data dims ({}, {}) do not match the model ({}, {})",
            train.d1(),
            train.d2(),
            trainer.params.config.d1,
            trainer.params.config.d2
        )));
    }

    create_dir(&a.common.out_dir)?;
    let out = TrainOutputs::new(&a.common.out_dir);
    let config = serde_json::json!({
        "model": trainer.params.config,
        "train": trainer.config,
        "data": a.data,
        "val_data": a.val_data,
        "resume": a.resume,
        "train_rows": train.n(),
        "val_rows": val.n(),
    });
    let outputs = vec![out.best.clone(), out.last.clone(), out.history.clone()];
    let mut manifest = RunManifest::new("train", trainer.config.seed, config, outputs);
    manifest.write(&out.manifest)?;

    let mut history = BufWriter::new(File::create(&out.history)?);
    for r in &trainer.history {
        writeln!(history, "{}", history_line(r))?;
    }
    history.flush()?;
    if !a.quiet {
        let v0 = validation_loss(&trainer.params, &val, trainer.config.batch_k)?;
        eprintln!(
            "{} params, {} train / {} val pairs, initial val loss {v0:.6}",
            trainer.params.config.param_count(),
            train.n(),
            val.n()
        );
    }

    let mut io_error = None;
    let result = trainer.run(&train, &val, |t| {
        let r = t.history.last().expect("epoch recorded");
        if !a.quiet {
            eprintln!(
                "epoch {:4}  train {:.6}  val {:.6}  tau {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.tau
            );
        }
        let step = writeln!(history, "{}", history_line(r))
            .and_then(|_| history.flush())
            .map_err(CliError::from)
            .and_then(|_| save_state(t, &out));
        if let Err(e) = step {
            io_error = Some(e);
            return Err(lightcrl::Error::Numerical("aborted after I/O failure".into()));
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    save_state(&trainer, &out)?;
    result?;

    manifest.finish(&out.manifest)?;
    let best_epoch = trainer
        .history
        .iter()
        .filter(|r| r.val_loss == trainer.best_val)
        .map(|r| r.epoch)
        .next();
    let reason = if trainer.stopped { "early stop" } else { "epoch limit" };
    match best_epoch {
        Some(e) => println!(
            "best val loss {:.6} at epoch {e} ({reason} after {} epochs); wrote {}",
            trainer.best_val,
            trainer.epoch,
            out.best.display()
        ),
        None => println!("no epochs run; wrote {}", out.best.display()),
    }
    Ok(EXIT_OK)
}

// -------------------------------------------------------------------
// eval

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!("{}", r.to_json_line());
    }
}

fn accuracy_report(metric: &str, k: Option<usize>, value: f64, support: usize) -> EvalReport {
    EvalReport {
        metric: metric.to_string(),
        k,
        direction: None,
        value,
        support,
        per_class: None,
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, protocol: &str) -> CliResult<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| CliError::usage(format!("--protocol {protocol} needs {flag}")))
}

fn eval<F: Real>(a: EvalArgs, file: &CheckpointFile) -> CliResult<i32> {
    let params: DfeParameters<F> = Checkpoint::<F>::from_file(file, None)?.params;
    let data = load(&a.data)?;
    let head = HeadConfig { epochs: a.epochs, lr: a.lr, eval_every: a.eval_every };
    match a.protocol {
        Protocol::Zeroshot => {
            let path = require(&a.prototypes, "--prototypes", "zeroshot")?;
            let protos = load(path)?;
            let names = (0..protos.n()).map(|c| format!("class{c}")).collect();
            let protos = ClassPrototypeSet::new(names, protos.m2().clone())?;
            let labels = data.require_labels("zeroshot")?;
            let r = zero_shot_classify(&params, data.m1(), labels, &protos, &a.topk)?;
            print_reports(&r.reports);
        }
        Protocol::Recall => {
            print_reports(&retrieval_recall_at_k(&params, &data, &a.ks)?);
        }
        Protocol::Probe => {
            let train = load(require(&a.train_data, "--train-data", "probe")?)?;
            let r = train_linear_probe(&params, &train, &data, &head)?;
            print_curve("probe", &r.curve, r.final_accuracy, data.n());
        }
        Protocol::Finetune => {
            let train = load(require(&a.train_data, "--train-data", "finetune")?)?;
            let r = finetune(&params, &train, &data, &head, false)?;
            print_curve("finetune", &r.curve, r.final_accuracy, data.n());
        }
    }
    Ok(EXIT_OK)
}

/// Curve points carry the epoch in `k`; the last line is the final accuracy.
fn print_curve(name: &str, curve: &[(usize, f64)], last: f64, support: usize) {
    let mut reports: Vec<EvalReport> = curve
        .iter()
        .map(|&(e, acc)| accuracy_report(&format!("{name}_curve"), Some(e), acc, support))
        .collect();
    reports.push(accuracy_report(&format!("{name}_accuracy"), None, last, support));
    print_reports(&reports);
}

// -------------------------------------------------------------------
// gradcheck

fn random_batch<F: Real>(k: usize, d: usize, rng: &mut Rng) -> Tensor<F> {
    let v = (0..k * d).map(|_| F::of(rng.normal())).collect();
    Tensor::new(&[k, d], v).expect("positive extents")
}

fn gradcheck<F: Real>(a: GradcheckArgs) -> CliResult<i32> {
    if a.d_model > GRADCHECK_MAX_D_MODEL {
        return Err(CliError::usage(format!(
            "gradcheck is limited to d_model ≤ {GRADCHECK_MAX_D_MODEL}, got {}",
            a.d_model
        )));
    }
    let kinds: Vec<FusionKind> = if a.fusion.is_empty() {
        vec![FusionKind::Add, FusionKind::Attention]
    } else {
        a.fusion.iter().map(|&f| f.into()).collect()
    };
    let mut worst = 0.0f64;
    for fusion in kinds {
        let cfg = ModelConfig {
            d1: a.d1,
            d2: a.d2,
            d_ctx: a.d_ctx,
            d_model: a.d_model,
            d_out: a.d_out,
            fusion,
        };
        cfg.validate()?;
        let params = init_parameters::<F>(&cfg, a.seed)?;
        let mut rng = Rng::with_stream(a.seed, 1);
        let x1 = random_batch::<F>(a.batch_k, a.d1, &mut rng);
        let x2 = random_batch::<F>(a.batch_k, a.d2, &mut rng);
        let report = gradient_check(&params, &x1, &x2, &FdConfig::precise())?;
        let at = report
            .worst
            .as_ref()
            .map(|(name, i)| format!("{name}[{i}]"))
            .unwrap_or_default();
        println!(
            "{fusion:<9} max relative error {:.3e} over {} coordinates (worst at {at})",
            report.max_rel_error,
            report.coords_checked()
        );
        worst = worst.max(report.max_rel_error);
    }
    let pass = worst <= a.threshold;
    println!(
        "{} max relative error {worst:.3e}, threshold {:.1e}",
        if pass { "PASS" } else { "FAIL" },
        a.threshold
    );
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

// -------------------------------------------------------------------
// inspect

/// Six significant digits without trailing zeros.
fn significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    let decimals = (5 - v.abs().log10().floor() as i32).max(0) as usize;
    let t = format!("{v:.decimals$}");
    if t.contains('.') {
        t.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        t
    }
}

fn inspect(a: InspectArgs) -> CliResult<i32> {
    let file = read_checkpoint(&a.checkpoint)?;
    let s = summarize(&file)?;
    if a.json {
        println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        return Ok(EXIT_OK);
    }
    let m = &s.model;
    println!("checkpoint   {}", a.checkpoint.display());
    println!("format       version {}, {}-bit, epoch {}", s.version, s.precision, s.epoch);
    println!(
        "model        fusion={} d1={} d2={} d_ctx={} d_model={} d_out={}",
        m.fusion, m.d1, m.d2, m.d_ctx, m.d_model, m.d_out
    );
    println!("sections");
    let width = s.sections.iter().map(|x| x.0.len()).max().unwrap_or(0);
    for (name, dtype, shape) in &s.sections {
        println!("  {name:<width$}  {dtype:<4}  {shape:?}");
    }
    println!("param_count  {}", s.param_count);
    println!("tau          {}", significant(s.tau));
    if s.best_val.is_finite() {
        println!("best_val     {}", s.best_val);
    }
    Ok(EXIT_OK)
}

// -------------------------------------------------------------------
// convert

fn convert(a: ConvertArgs) -> CliResult<i32> {
    let from_jsonl = a.input.extension().is_some_and(|e| e == "jsonl");
    let set: PairedEmbeddingSet = if from_jsonl {
        let f = File::open(&a.input).map_err(|e| at(&a.input)(e.into()))?;
        read_jsonl(BufReader::new(f), a.split.into()).map_err(at(&a.input))?
    } else {
        load(&a.input)?
    };
    if from_jsonl {
        save_embeddings(&set, &a.output)?;
    } else {
        let mut w = BufWriter::new(File::create(&a.output)?);
        write_jsonl(&set, &mut w)?;
        w.flush()?;
    }
    println!("converted {} pairs to {}", set.n(), a.output.display());
    Ok(EXIT_OK)
}
