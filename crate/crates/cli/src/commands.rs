use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::time::Instant;

use cutpaste::augment::synthetic::{DefectFill, DefectShape};
use cutpaste::augment::{
    apply_patch_params, sample_confetti, sample_cutout, sample_cutpaste, sample_cutpaste_scar,
    sample_scar, CutoutFill, PatchParams,
};
use cutpaste::config::{read_config, Estimator, ExperimentConfig};
use cutpaste::dataset::{load_image, scan_layout, Dataset, DatasetLayout};
use cutpaste::error::ErrorKind;
use cutpaste::eval::{
    fit_patch_estimator, run_experiment, run_sweep, Detector, ExperimentOptions, ExperimentReport,
    ImageEstimator, PatchEstimator, RunResult, Summary, SweepSpec,
};
use cutpaste::localize::{default_sigma, emit_heatmap, localize, GridScorer};
use cutpaste::model::{load_checkpoint, CheckpointHeader, Model};
use cutpaste::rng::{streams, substream};
use cutpaste::score::{write_embeddings, GdeModel, Regularization};
use cutpaste::synth::{generate, write_layout, SynthConfig};
use cutpaste::train::{finetune_loop, train_loop, RunOptions, TrainConfig, TrainReport};
use cutpaste::{Error, ImageBuffer, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::{io, RunManifest};
use crate::{exit, Augmentation, Command, Common, DataArgs, Preset, TrainArgs, DATA_ROOT_ENV};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Interrupted { .. } => exit::INTERRUPTED,
        _ => match e.kind() {
            ErrorKind::DataOrConfig => exit::DATA_OR_CONFIG,
            ErrorKind::Numerical => exit::NUMERICAL,
        },
    }
}

/// Preset, then config file, then `--set` pairs, then dedicated flags.
fn resolve_config(common: &Common, train: Option<&TrainArgs>) -> Result<ExperimentConfig> {
    let mut cfg = match common.preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    if let Some(path) = &common.config {
        cfg.apply_map(&read_config(path)?)?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(t) = train {
        let flags = [
            ("train.task", t.task.clone()),
            ("train.level", t.level.clone()),
            ("train.steps", t.steps.map(|v| v.to_string())),
            ("train.batch_size", t.batch_size.map(|v| v.to_string())),
            ("train.lr", t.lr.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Manifest bookkeeping around one command.
struct Run<'a> {
    manifest: RunManifest,
    out: PathBuf,
    stop: &'a AtomicBool,
}

impl Run<'_> {
    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Layout {
                path: path.to_path_buf(),
                reason: "does not exist".into(),
            });
        }
        self.manifest.add_input(path)?;
        self.manifest.write(&self.out)
    }

    fn output(&mut self, path: PathBuf) -> PathBuf {
        self.manifest.outputs.push(path.clone());
        path
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        let path = self.out.join(name);
        self.output(path)
    }

    fn config(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    fn options(&self) -> RunOptions<'_> {
        RunOptions {
            log_path: None,
            checkpoint_path: None,
            stop: Some(self.stop),
        }
    }
}

fn common_of(cmd: &Command) -> (&'static str, &Common, Option<&TrainArgs>) {
    match cmd {
        Command::AugmentPreview { common, .. } => ("augment-preview", common, None),
        Command::SynthGen { common, .. } => ("synth-gen", common, None),
        Command::Train { common, train, .. } => ("train", common, Some(train)),
        Command::Finetune { common, train, .. } => ("finetune", common, Some(train)),
        Command::Score { common, .. } => ("score", common, None),
        Command::Localize { common, .. } => ("localize", common, None),
        Command::Eval { common, train, .. } => ("eval", common, Some(train)),
        Command::Sweep { common, train, .. } => ("sweep", common, Some(train)),
    }
}

pub fn run(cmd: Command, argv: Vec<String>, stop: &AtomicBool) -> Result<()> {
    let (name, common, train) = common_of(&cmd);
    let cfg = resolve_config(common, train)?;
    let out = common.out.clone();
    let mut run = Run {
        manifest: RunManifest::new(name, argv, cfg),
        out,
        stop,
    };
    run.manifest.write(&run.out)?;
    if let Some(path) = &common.config {
        run.input(&path.clone())?;
    }
    let result = execute(cmd, &mut run);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let finished = run.manifest.finish(&run.out, &status);
    result.and(finished)
}

fn execute(cmd: Command, run: &mut Run<'_>) -> Result<()> {
    match cmd {
        Command::AugmentPreview {
            image,
            aug,
            size,
            replay,
            output,
            ..
        } => augment_preview(run, &image, aug, size, replay.as_deref(), output),
        Command::SynthGen {
            root,
            category,
            size,
            n_train,
            n_test_normal,
            n_test_per_shape,
            shapes,
            natural_fill,
            ..
        } => {
            let shapes = shapes
                .iter()
                .map(|s| s.trim().parse::<DefectShape>())
                .collect::<Result<Vec<_>>>()?;
            let synth = SynthConfig {
                category,
                size,
                n_train,
                n_test_normal,
                n_test_per_shape,
                shapes,
                fill: if natural_fill {
                    DefectFill::NaturalImage
                } else {
                    DefectFill::RandomColor
                },
                seed: run.config().seed,
                ..SynthConfig::default()
            };
            synth_gen(run, root, &synth)
        }
        Command::Train { data, .. } => train(run, &data, None),
        Command::Finetune {
            data, pretrained, ..
        } => train(run, &data, Some(&pretrained)),
        Command::Score {
            data, checkpoint, ..
        } => score(run, &data, &checkpoint),
        Command::Localize {
            checkpoint,
            image,
            patch_model,
            root,
            category,
            patch,
            stride,
            sigma,
            ..
        } => {
            let data = match (root, category) {
                (root, Some(category)) => Some(DataArgs { root, category }),
                _ => None,
            };
            let geometry = (patch, stride, sigma);
            localize_images(
                run,
                &checkpoint,
                &image,
                patch_model.as_deref(),
                data,
                geometry,
            )
        }
        Command::Eval {
            data, checkpoint, ..
        } => eval(run, &data, checkpoint.as_deref()),
        Command::Sweep {
            data,
            param,
            values,
            repeats,
            ..
        } => sweep(
            run,
            &data,
            SweepSpec {
                parameter: param,
                values,
                repeats,
            },
        ),
    }
}

fn data_root(root: Option<&Path>) -> Result<PathBuf> {
    root.map(Path::to_path_buf).ok_or_else(|| {
        Error::Config(format!(
            "no dataset root given; pass --root or set {DATA_ROOT_ENV}"
        ))
    })
}

fn load_data(run: &mut Run<'_>, args: &DataArgs) -> Result<(DatasetLayout, Dataset)> {
    let root = data_root(args.root.as_deref())?;
    let layout = scan_layout(&root, &args.category)?;
    run.input(&root.join(&args.category))?;
    let data = Dataset::load(&layout, run.config().working_size)?;
    Ok((layout, data))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Replayable record of one augmentation.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    augmentation: String,
    seed: u64,
    image_size: usize,
    params: PatchParams,
}

fn augment_preview(
    run: &mut Run<'_>,
    image: &Path,
    aug: Augmentation,
    size: Option<usize>,
    replay: Option<&Path>,
    output: PathBuf,
) -> Result<()> {
    let cfg = run.config().clone();
    run.input(image)?;
    let size = size.unwrap_or(cfg.working_size);
    let x = load_image(image, size)?;
    let (y, sidecar) = match replay {
        Some(path) => {
            run.input(path)?;
            let bytes = fs::read(path).map_err(|e| io(path, e))?;
            let sidecar: Sidecar = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            (apply_patch_params(&x, &sidecar.params)?, sidecar)
        }
        None => {
            let mut rng = substream(cfg.seed, streams::AUGMENT);
            let a = &cfg.train.augment;
            let (y, params) = match aug {
                Augmentation::Cutpaste => sample_cutpaste(&x, a, &mut rng)?,
                Augmentation::CutpasteScar => sample_cutpaste_scar(&x, a, &mut rng)?,
                Augmentation::Scar => sample_scar(&x, a, &mut rng)?,
                Augmentation::CutoutGrey => sample_cutout(&x, CutoutFill::Grey, a, &mut rng)?,
                Augmentation::CutoutMean => sample_cutout(&x, CutoutFill::MeanPixel, a, &mut rng)?,
                Augmentation::CutoutColor => {
                    sample_cutout(&x, CutoutFill::RandomColor, a, &mut rng)?
                }
                Augmentation::Confetti => sample_confetti(&x, a, &mut rng)?,
            };
            let name = format!("{aug:?}");
            let sidecar = Sidecar {
                augmentation: name,
                seed: cfg.seed,
                image_size: size,
                params,
            };
            (y, sidecar)
        }
    };
    let png = run.output(output);
    let json_path = run.output(png.with_extension("json"));
    ensure_parent(&png)?;
    y.save_png(&png)?;
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&json_path, &(json + "\n"))?;
    println!("wrote {} and {}", png.display(), json_path.display());
    Ok(())
}

fn synth_gen(run: &mut Run<'_>, root: Option<PathBuf>, synth: &SynthConfig) -> Result<()> {
    let root = data_root(root.as_deref())?;
    let data = generate(synth)?;
    write_layout(&data, &root)?;
    let dir = run.output(root.join(&synth.category));
    println!(
        "wrote {} training and {} test images to {}",
        data.train.len(),
        data.test.images.len(),
        dir.display()
    );
    Ok(())
}

fn train(run: &mut Run<'_>, args: &DataArgs, pretrained: Option<&Path>) -> Result<()> {
    let mut cfg = run.config().clone();
    if let Some(p) = pretrained {
        run.input(p)?;
        cfg.model.pretrained_weights = Some(p.to_path_buf());
        run.manifest.config = cfg.clone();
    }
    let (_, data) = load_data(run, args)?;
    let tcfg = cfg.train_for_seed(cfg.seed);
    let mut model = Model::<f32>::build(cfg.model.clone(), tcfg.task.n_classes(), cfg.seed)?;
    let ckpt = run.artifact("model.ckpt");
    let log = run.artifact("train_log.csv");
    run.manifest.write(&run.out)?;
    let opts = RunOptions {
        log_path: Some(&log),
        checkpoint_path: Some(&ckpt),
        ..run.options()
    };
    let report = match pretrained {
        Some(_) => finetune_loop(&mut model, &data.train, &cfg.finetune, &tcfg, opts)?,
        None => train_loop(&mut model, &data.train, &tcfg, opts)?,
    };
    if let Some(last) = report.log.last() {
        println!(
            "trained {} steps, final loss {:.4}, proxy accuracy {:.3}",
            report.steps, last.loss, last.proxy_acc
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Loads a checkpoint and aligns the model and training settings with it.
fn load_model(run: &mut Run<'_>, path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    run.input(path)?;
    let (model, header) = load_checkpoint::<f32>(path)?;
    let cfg = &mut run.manifest.config;
    cfg.model = header.config.clone();
    cfg.model.pretrained_weights = None;
    if let Ok(t) = serde_json::from_value::<TrainConfig>(header.extra.clone()) {
        cfg.train.task = t.task;
        cfg.train.level = t.level;
        cfg.train.patch_size = t.patch_size;
    }
    cfg.validate()?;
    run.manifest.write(&run.out)?;
    Ok((model, header))
}

fn ridge(cfg: &ExperimentConfig) -> Regularization {
    match cfg.estimator {
        Estimator::Gde { regularization } => regularization,
        Estimator::Kde { .. } => Regularization::default(),
    }
}

fn score(run: &mut Run<'_>, args: &DataArgs, checkpoint: &Path) -> Result<()> {
    let (model, _) = load_model(run, checkpoint)?;
    let (layout, data) = load_data(run, args)?;
    let cfg = run.config().clone();
    let detector = Detector::fit(model, &data.train, &cfg)?;

    let train_refs: Vec<&ImageBuffer> = data.train.iter().collect();
    let test_refs: Vec<&ImageBuffer> = data.test.images.iter().collect();
    let train_path = run.artifact("train_embeddings.bin");
    write_embeddings(&train_path, &detector.model.embed_rows(&train_refs)?)?;
    let test_path = run.artifact("test_embeddings.bin");
    write_embeddings(&test_path, &detector.model.embed_rows(&test_refs)?)?;

    match &detector.image {
        ImageEstimator::Gde(m) => m.save(&run.artifact("gde.json"))?,
        ImageEstimator::Kde(m) => {
            let path = run.artifact("kde.json");
            let json = serde_json::to_string(m).map_err(|e| Error::Data(e.to_string()))?;
            write_text(&path, &json)?;
        }
    }
    if let Some(PatchEstimator::Shared(m)) = &detector.patch {
        m.save(&run.artifact("patch_gde.json"))?;
    }

    let scores = detector.image_scores(&data.test.images)?;
    let mut csv = String::from("image,defect_type,label,score\n");
    for ((entry, label), s) in layout.test().zip(&data.test.labels).zip(&scores) {
        csv.push_str(&format!(
            "{},{},{label},{s}\n",
            entry.image_path.display(),
            entry.defect_type
        ));
    }
    let path = run.artifact("scores.csv");
    write_text(&path, &csv)?;
    println!("scored {} test images -> {}", scores.len(), path.display());
    Ok(())
}

fn localize_images(
    run: &mut Run<'_>,
    checkpoint: &Path,
    images: &[PathBuf],
    patch_model: Option<&Path>,
    data: Option<DataArgs>,
    (patch, stride, sigma): (Option<usize>, Option<usize>, Option<f64>),
) -> Result<()> {
    let (model, _) = load_model(run, checkpoint)?;
    let cfg = run.config().clone();
    let patch = patch.unwrap_or(cfg.localize.patch_size);
    let stride = stride.unwrap_or(cfg.localize.stride);
    let sigma = sigma
        .or(cfg.localize.sigma)
        .unwrap_or_else(|| default_sigma(patch));
    let gde = match (patch_model, data) {
        (Some(path), _) => {
            run.input(path)?;
            GdeModel::load(path)?
        }
        (None, Some(args)) => {
            let (_, data) = load_data(run, &args)?;
            match fit_patch_estimator(&model, &data.train, patch, stride, false, ridge(&cfg))? {
                PatchEstimator::Shared(m) => {
                    m.save(&run.artifact("patch_gde.json"))?;
                    m
                }
                PatchEstimator::PerLocation(_) => unreachable!("shared estimator requested"),
            }
        }
        (None, None) => {
            return Err(Error::Config(
                "localize needs --patch-model or a dataset (--root/--category) to fit one".into(),
            ))
        }
    };
    fs::create_dir_all(&run.out).map_err(|e| io(&run.out, e))?;
    for image in images {
        run.input(image)?;
        let x = load_image(image, cfg.working_size)?;
        let (grid, pixels) = localize(&model, &x, GridScorer::Shared(&gde), patch, stride, sigma)?;
        let stem = image
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let png = run.artifact(&format!("{stem}_heatmap.png"));
        let raw = run.artifact(&format!("{stem}.pxmap"));
        emit_heatmap(&pixels, &x, &png, &raw)?;
        let max = grid
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{}: {}x{} grid, max patch score {max:.4} -> {}",
            image.display(),
            grid.rows,
            grid.cols,
            png.display()
        );
    }
    Ok(())
}

fn eval(run: &mut Run<'_>, args: &DataArgs, checkpoint: Option<&Path>) -> Result<()> {
    let report = match checkpoint {
        Some(path) => {
            let (model, header) = load_model(run, path)?;
            let (_, data) = load_data(run, args)?;
            let cfg = run.config().clone();
            let start = Instant::now();
            let detector = Detector::fit(model, &data.train, &cfg)?;
            let ev = detector.evaluate(&data.test)?;
            let result = RunResult {
                category: data.category.clone(),
                task: cfg.train.task.to_string(),
                seed: cfg.seed,
                image_auc: ev.image_auc,
                pixel_auc: ev.pixel_auc,
                wall_time_s: start.elapsed().as_secs_f64(),
                image_scores: ev.image_scores,
                train: TrainReport {
                    log: Vec::new(),
                    steps: header.step as usize,
                    checkpoint: Some(path.to_path_buf()),
                },
            };
            let runs = vec![result];
            ExperimentReport {
                summary: Summary::of(&runs),
                runs,
                ensemble_auc: None,
            }
        }
        None => {
            let (_, data) = load_data(run, args)?;
            let opts = ExperimentOptions {
                out_dir: Some(run.out.clone()),
                stop: Some(run.stop),
            };
            run_experiment(&data, run.config(), &opts)?
        }
    };
    let path = run.artifact("report.csv");
    write_text(&path, &report.to_csv())?;
    let s = &report.summary;
    print!("image AUC {:.4}", s.image_auc_mean);
    if let Some(p) = s.pixel_auc_mean {
        print!(", pixel AUC {p:.4}");
    }
    println!(" -> {}", path.display());
    Ok(())
}

fn sweep(run: &mut Run<'_>, args: &DataArgs, spec: SweepSpec) -> Result<()> {
    let (_, data) = load_data(run, args)?;
    let opts = ExperimentOptions {
        out_dir: None,
        stop: Some(run.stop),
    };
    let table = run_sweep(&data, &spec, run.config(), &opts)?;
    let path = run.artifact("sweep.csv");
    write_text(&path, &table.to_csv())?;
    println!("{} runs -> {}", table.run_count(), path.display());
    Ok(())
}
