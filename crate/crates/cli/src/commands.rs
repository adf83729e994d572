use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use metamorph_core::checkpoint::AdamState;
use metamorph_core::container::FORMAT_VERSION;
use metamorph_core::dataset::{ManifestSources, MANIFEST_VERSION};
use metamorph_core::kv::KvFile;
use metamorph_core::metrics::METRICS_VERSION;
use metamorph_core::{
    build_dataset, dice, diff_panel, fit_pair_observed, infer, load_gray, load_mask, save_field, save_gray,
    save_trajectory, ssd, train_dataset_resume, CShape, Checkpoint, DatasetManifest, ElasticDeformConfig, Error,
    Metrics, RegistrationConfig, Resume, ScalarField, TrajectoryRecord, VectorField,
};

use crate::{Cli, Command, EvalArgs, InferArgs, RegisterArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => synth(cli, args),
        Command::Register(args) => register(cli, args),
        Command::Train(args) => train(cli, args),
        Command::Infer(args) => infer_cmd(cli, args),
        Command::Eval(args) => eval(args),
    }
}

fn progress(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn base_config(cli: &Cli) -> RegistrationConfig {
    RegistrationConfig {
        seed: cli.seed,
        threads: cli.threads,
        ..RegistrationConfig::default()
    }
}

/// Writes `config.txt`: the command, its inputs, file-format versions and
/// every configuration value (defaults included).
fn write_snapshot(dir: &Path, command: &str, inputs: &[(&str, String)], config: Option<&RegistrationConfig>) -> Result<()> {
    let mut kv = KvFile::new();
    kv.push("command", command)
        .push("metamorph_version", env!("CARGO_PKG_VERSION"))
        .push("container_version", FORMAT_VERSION)
        .push("manifest_version", MANIFEST_VERSION)
        .push("metrics_version", METRICS_VERSION);
    for (k, v) in inputs {
        kv.push(format!("input.{k}"), v);
    }
    if let Some(config) = config {
        for (k, v) in config.to_kv().entries() {
            kv.push(format!("config.{k}"), v);
        }
    }
    kv.write(&dir.join("config.txt"), "run configuration snapshot")?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let elastic = ElasticDeformConfig {
        spacing: args.spacing,
        max_displacement: args.max_displacement,
        seed: 0,
    };
    elastic.validate()?;
    let started = Instant::now();
    let manifest = build_dataset(args.n, args.size, cli.seed, &CShape::default(), &elastic, &args.out)?;
    write_snapshot(
        &args.out,
        "synth",
        &[
            ("n", args.n.to_string()),
            ("size", args.size.to_string()),
            ("seed", cli.seed.to_string()),
        ],
        None,
    )?;
    progress(
        cli,
        format!(
            "wrote {} images to {} in {:.1}s",
            manifest.len(),
            args.out.display(),
            started.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

fn load_pair(source: &Path, target: &Path) -> Result<(ScalarField, ScalarField)> {
    let s: ScalarField = load_gray(source)?;
    let t: ScalarField = load_gray(target)?;
    if s.tensor().shape() != t.tensor().shape() {
        return Err(Error::Shape(format!(
            "source is {}x{}, target is {}x{}",
            s.height(),
            s.width(),
            t.height(),
            t.width()
        ))
        .into());
    }
    Ok((s, t))
}

fn save_record(dir: &Path, record: &TrajectoryRecord) -> Result<()> {
    let fields = dir.join("fields");
    create_dir(&fields)?;
    save_trajectory(record, &dir.join("trajectory.bin"))?;
    for (t, v) in record.velocities.iter().enumerate() {
        save_field(&VectorField::new(v.clone())?, &fields.join(format!("velocity_{t:03}.field")))?;
    }
    for (t, img) in record.images.iter().enumerate() {
        save_gray(&ScalarField::new(img.clone())?, &fields.join(format!("image_{t:03}.png")))?;
    }
    Ok(())
}

fn register(cli: &Cli, args: &RegisterArgs) -> Result<()> {
    let mut config = base_config(cli);
    args.model.apply(&mut config);
    config.max_iters = args.max_iters;
    config.validate()?;
    let (source, target) = load_pair(&args.source, &args.target)?;
    let mask: Option<ScalarField> = args.mask.as_deref().map(load_mask).transpose()?;
    create_dir(&args.out)?;
    let mut inputs = vec![("source", path_str(&args.source)), ("target", path_str(&args.target))];
    if let Some(m) = &args.mask {
        inputs.push(("mask", path_str(m)));
    }
    write_snapshot(&args.out, "register", &inputs, Some(&config))?;

    let started = Instant::now();
    let mut log = String::from("# iteration total data kinetic intensity\n");
    let every = (config.max_iters / 20).max(1);
    let outcome = fit_pair_observed(&source, &target, mask.as_ref(), &config, &mut |i, e| {
        log.push_str(&format!(
            "{i} {:e} {:e} {:e} {:e}\n",
            e.total, e.data_term, e.kinetic_term, e.intensity_term
        ));
        if i % every == 0 {
            progress(
                cli,
                format!(
                    "iter {i:>5} energy {:.6e} data {:.6e} kinetic {:.3e} intensity {:.3e}",
                    e.total, e.data_term, e.kinetic_term, e.intensity_term
                ),
            );
        }
    });
    let energy_path = args.out.join("energy.txt");
    fs::write(&energy_path, &log).map_err(|source| Error::Io {
        path: energy_path,
        source,
    })?;
    let (params, report) = outcome?;
    let fit_seconds = started.elapsed().as_secs_f64();

    let inference_started = Instant::now();
    let result = infer(&source, mask.as_ref(), &params, &config, args.record)?;
    let infer_seconds = inference_started.elapsed().as_secs_f64();
    save_gray(&result.deformed, &args.out.join("deformed.png"))?;
    save_gray(&result.shape_only, &args.out.join("shape_only.png"))?;
    diff_panel(&source, &result.deformed, &target, &args.out)?;
    if let Some(record) = &result.trajectory {
        save_record(&args.out, record)?;
    }
    let mut checkpoint = Checkpoint::new(config.clone(), params);
    checkpoint.meta.push("target", path_str(&args.target));
    checkpoint.save(&args.out.join("params.ckpt"))?;

    let metrics = Metrics::compare(&result.deformed, &target, &source)?
        .with_timing("fit", fit_seconds)
        .with_timing("infer", infer_seconds);
    metrics.write(&args.out.join("metrics.txt"))?;
    let mut summary = KvFile::new();
    summary
        .push("iterations", report.iterations())
        .push("stop_reason", report.stop_reason)
        .push("best_iteration", report.best_iteration)
        .push("shape_only_ssd", ssd(&result.shape_only, &target)?);
    summary.write(&args.out.join("fit.txt"), "optimization summary")?;
    progress(
        cli,
        format!(
            "ssd {:.4} -> {:.4} (reduction {:.1}%), {} iterations ({}), {:.1}s",
            metrics.initial_ssd,
            metrics.ssd,
            100.0 * metrics.ssd_reduction,
            report.iterations(),
            report.stop_reason,
            fit_seconds
        ),
    );
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let target: ScalarField = load_gray(&args.target)?;
    let mut config = base_config(cli);
    args.model.apply(&mut config);
    config.epochs = args.epochs;
    config.batch_size = args.batch_size;
    config.shuffle = !args.no_shuffle;
    config.validate()?;
    if manifest.size != target.height() || manifest.size != target.width() {
        return Err(Error::Shape(format!(
            "dataset images are {0}x{0}, target is {1}x{2}",
            manifest.size,
            target.height(),
            target.width()
        ))
        .into());
    }

    let resume = if args.resume {
        let saved: Checkpoint = Checkpoint::load(&args.checkpoint)?;
        let adam = saved
            .adam
            .as_ref()
            .ok_or_else(|| Error::Contract("checkpoint holds no optimizer state to resume from".into()))?
            .restore(&config)?;
        let completed_epochs: usize = saved.meta.parse_value("epochs_completed", &args.checkpoint)?;
        Some(Resume {
            params: saved.params,
            adam,
            completed_epochs,
        })
    } else {
        None
    };

    let out_dir = args
        .checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out_dir)?;
    let mut inputs = vec![
        ("manifest", path_str(&manifest.manifest_path())),
        ("target", path_str(&args.target)),
        ("checkpoint", path_str(&args.checkpoint)),
    ];
    if let Some(m) = &args.mask_dir {
        inputs.push(("mask_dir", path_str(m)));
    }
    write_snapshot(&out_dir, "train", &inputs, Some(&config))?;

    let sources = ManifestSources::new(&manifest, args.mask_dir.clone());
    let log_path = out_dir.join("epochs.txt");
    let mut log = String::from("# epoch total_energy mean_energy seconds\n");
    progress(
        cli,
        format!(
            "training on {} images, {} epochs, batch {}",
            manifest.len(),
            config.epochs,
            config.batch_size
        ),
    );
    let (_, report) = train_dataset_resume(&sources, &target, &config, resume, &mut |summary, params, adam| {
        let mut ck = Checkpoint::new(config.clone(), params.clone());
        ck.adam = Some(AdamState::capture(adam));
        ck.meta
            .push("target", path_str(&args.target))
            .push("epochs_completed", summary.epoch + 1);
        ck.save(&args.checkpoint)?;
        log.push_str(&format!(
            "{} {:e} {:e} {:.3}\n",
            summary.epoch, summary.energy, summary.mean_energy, summary.seconds
        ));
        fs::write(&log_path, &log).map_err(|source| Error::Io {
            path: log_path.clone(),
            source,
        })?;
        progress(
            cli,
            format!(
                "epoch {:>3} mean energy {:.4} ({:.1}s)",
                summary.epoch, summary.mean_energy, summary.seconds
            ),
        );
        Ok(())
    })?;
    progress(
        cli,
        format!("{} batches in {:.1}s", report.iterations(), report.total_seconds()),
    );
    Ok(())
}

fn infer_cmd(cli: &Cli, args: &InferArgs) -> Result<()> {
    let checkpoint: Checkpoint = Checkpoint::load(&args.checkpoint)?;
    let mut config = checkpoint.config.clone();
    config.threads = cli.threads;
    let source: ScalarField = load_gray(&args.source)?;
    let mask: Option<ScalarField> = args.mask.as_deref().map(load_mask).transpose()?;
    let target_path = args
        .target
        .clone()
        .or_else(|| checkpoint.meta.get("target").map(PathBuf::from));
    create_dir(&args.out)?;
    let mut inputs = vec![
        ("checkpoint", path_str(&args.checkpoint)),
        ("source", path_str(&args.source)),
    ];
    if let Some(t) = &target_path {
        inputs.push(("target", path_str(t)));
    }
    write_snapshot(&args.out, "infer", &inputs, Some(&config))?;

    let started = Instant::now();
    let result = infer(&source, mask.as_ref(), &checkpoint.params, &config, args.record)?;
    let seconds = started.elapsed().as_secs_f64();
    save_gray(&result.deformed, &args.out.join("deformed.png"))?;
    save_gray(&result.shape_only, &args.out.join("shape_only.png"))?;
    if let Some(record) = &result.trajectory {
        save_record(&args.out, record)?;
    }
    match target_path {
        Some(path) => {
            let target: ScalarField = load_gray(&path)?;
            let metrics = Metrics::compare(&result.deformed, &target, &source)?.with_timing("infer", seconds);
            metrics.write(&args.out.join("metrics.txt"))?;
            diff_panel(&source, &result.deformed, &target, &args.out)?;
            progress(
                cli,
                format!(
                    "ssd {:.4} -> {:.4} (reduction {:.1}%) in {:.3}s",
                    metrics.initial_ssd,
                    metrics.ssd,
                    100.0 * metrics.ssd_reduction,
                    seconds
                ),
            );
        }
        None => progress(cli, format!("inference took {seconds:.3}s")),
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (output, target) = load_pair(&args.output, &args.target)?;
    let mut metrics = match &args.source {
        Some(path) => {
            let source: ScalarField = load_gray(path)?;
            Metrics::compare(&output, &target, &source)?
        }
        None => Metrics::new(ssd(&output, &target)?, 0.0),
    };
    if let (Some(pred), Some(reference)) = (&args.pred_mask, &args.ref_mask) {
        let pred: ScalarField = load_mask(pred)?;
        let reference: ScalarField = load_mask(reference)?;
        metrics.dice = Some(dice(&pred, &reference)?);
    }
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            let mut inputs = vec![("output", path_str(&args.output)), ("target", path_str(&args.target))];
            if let Some(s) = &args.source {
                inputs.push(("source", path_str(s)));
            }
            write_snapshot(dir, "eval", &inputs, None)?;
            metrics.write(&dir.join("metrics.txt"))?;
        }
        None => print!("{}", metrics.to_kv().render("")),
    }
    Ok(())
}
