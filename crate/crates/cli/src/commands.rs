use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use defectscan_core::augment;
use defectscan_core::data::{self, clean_filter, CleanDecision, CleanPolicy, Manifest, Split, SynthOptions};
use defectscan_core::explain::{self, GradCamConfig, LayerSelector, Target};
use defectscan_core::metrics::{self, REPORT_HEADER, THRESHOLD};
use defectscan_core::raster::contact_sheet;
use defectscan_core::trainer::{self, Dataset, Model};
use defectscan_core::{Error, Image, Result};
use log::{info, warn};

use crate::config::RunConfig;
use crate::{Command, TrainArgs};

pub fn run(command: Command) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Synth {
            n,
            positive_fraction,
            seed,
            size,
            vote_noise,
            out: dir,
        } => {
            let opts = SynthOptions { size, vote_noise };
            let m = data::synth_generate(&dir, n, positive_fraction, seed, &opts)?;
            let counts = m.class_counts();
            writeln!(
                out,
                "{} images in {}: {} negative, {} positive",
                m.records.len(),
                dir.display(),
                counts.get(&0).unwrap_or(&0),
                counts.get(&1).unwrap_or(&0)
            )?;
        }
        Command::Split {
            manifest,
            ratios,
            seed,
            out: dest,
        } => {
            let m = Manifest::read_csv(&manifest)?;
            let ratios: [f64; 3] = ratios
                .try_into()
                .map_err(|_| Error::Config("exactly three split ratios are required".into()))?;
            let mut split = data::stratified_split(&m, ratios, seed)?;
            let dest = dest.unwrap_or(manifest);
            relocate(&mut split, &dest)?;
            split.write_csv(&dest)?;
            for ((s, label), count) in split.split_counts() {
                writeln!(out, "{},{label},{count}", s.as_str())?;
            }
        }
        Command::Train(args) => {
            let dir = cmd_train(args)?;
            writeln!(out, "{}", dir.display())?;
        }
        Command::Eval {
            model,
            config,
            manifest,
            split,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let manifest = manifest
                .or(cfg.manifest)
                .ok_or_else(|| Error::Config("eval needs --manifest or a config naming one".into()))?;
            let split: Split = split.parse()?;
            let mut model = trainer::load_model(&model)?;
            let m = Manifest::read_csv(&manifest)?;
            let set = load_split(&m, split, &cfg.clean)?;
            let report = trainer::evaluate(&mut model, &set, cfg.train.batch_size)?;
            writeln!(out, "{REPORT_HEADER}")?;
            writeln!(out, "{}", metrics::report_row(split.as_str(), &report))?;
        }
        Command::Predict { model, images } => {
            let mut model = trainer::load_model(&model)?;
            for path in images {
                let img = Image::from_rgb8(&data::load_upright(&path)?);
                let score = model.predict(std::slice::from_ref(&img), 1)?[0];
                let id = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
                writeln!(out, "{id},{score:.4},{}", u8::from(score >= THRESHOLD))?;
            }
        }
        Command::Gradcam {
            model,
            image,
            out: dest,
            layer,
            negative,
            alpha,
        } => {
            let mut model = trainer::load_model(&model)?;
            let img = Image::from_rgb8(&data::load_upright(&image)?);
            let cfg = GradCamConfig {
                tap: layer,
                target: if negative { Target::Negative } else { Target::Positive },
            };
            let heat = explain::gradcam(&mut model, &img, cfg)?;
            explain::overlay(&img, &heat, alpha)?.save_png(&dest)?;
            let score = model.predict(std::slice::from_ref(&img), 1)?[0];
            writeln!(out, "{},{score:.4}", dest.display())?;
        }
        Command::Augpreview {
            image,
            n,
            seed,
            config,
            out: dest,
        } => {
            if n == 0 {
                return Err(Error::Config("augpreview needs at least one variant".into()));
            }
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?.train.augment,
                None => augment::AugmentConfig::default(),
            };
            cfg.validate()?;
            let img = Image::from_rgb8(&data::load_upright(&image)?);
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let variants = (0..n as u64)
                .map(|epoch| augment::augment(&img, &cfg, seed, &id, epoch))
                .collect::<Result<Vec<_>>>()?;
            let cols = (n as f64).sqrt().ceil() as usize;
            contact_sheet(&variants, cols)?.save_png(&dest)?;
            writeln!(out, "{}", dest.display())?;
        }
        Command::Featmaps {
            model,
            image,
            layer,
            out: dir,
        } => {
            let mut model = trainer::load_model(&model)?;
            let selector: LayerSelector = layer.parse()?;
            let img = Image::from_rgb8(&data::load_upright(&image)?);
            let maps = explain::feature_maps(&mut model, &img, selector)?;
            fs::create_dir_all(&dir)?;
            let dest = dir.join(format!("featmaps-{}.png", maps.layer_name()));
            maps.grid((64 / maps.width).max(1))?.save_png(&dest)?;
            writeln!(out, "{}", dest.display())?;
        }
    }
    Ok(())
}

/// Keeps record paths valid when the manifest moves to another directory.
fn relocate(m: &mut Manifest, dest: &Path) -> Result<()> {
    let new_root = dest.parent().map(Path::to_path_buf).unwrap_or_default();
    if std::path::absolute(&new_root)? == std::path::absolute(&m.root)? {
        return Ok(());
    }
    for i in 0..m.records.len() {
        let resolved = std::path::absolute(m.resolve(&m.records[i]))?;
        m.records[i].path = resolved;
    }
    m.root = new_root;
    Ok(())
}

/// Loads one split and drops images the cleaning policy rejects.
fn load_split(m: &Manifest, split: Split, policy: &CleanPolicy) -> Result<Dataset> {
    let set = Dataset::from_manifest(m, split)?;
    let total = set.len();
    let kept: Vec<_> = set
        .samples
        .into_iter()
        .filter(|s| match clean_filter(Some(&s.image), policy) {
            CleanDecision::Keep => true,
            CleanDecision::Reject(reason) => {
                warn!("{}: rejected ({})", s.id, reason.code());
                false
            }
        })
        .collect();
    if kept.len() < total {
        warn!("{} split: kept {} of {total} images", split.as_str(), kept.len());
    }
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "the {} split has no usable images; run `split` first",
            split.as_str()
        )));
    }
    Ok(Dataset::new(kept))
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.pretrain_epochs {
        cfg.train.pretrain.epochs = e;
    }
    if args.no_pretrain {
        cfg.train.pretrain.epochs = 0;
    }
    if let Some(e) = args.head_epochs {
        cfg.train.head.epochs = e;
    }
    if let Some(e) = args.finetune_epochs {
        cfg.train.finetune.epochs = e;
    }
    cfg.deterministic |= args.deterministic;
    cfg.resolve()
}

fn create_run_dir(parent: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(parent)?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default();
    let base = format!("run-{stamp}-{seed}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("the suffix search always terminates")
}

fn cmd_train(args: TrainArgs) -> Result<PathBuf> {
    let cfg = resolve_config(&args)?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("train needs --manifest or a config naming one".into()))?;
    let m = Manifest::read_csv(&manifest_path)?;
    let train = load_split(&m, Split::Train, &cfg.clean)?;
    let val = load_split(&m, Split::Val, &cfg.clean)?;
    let test = load_split(&m, Split::Test, &cfg.clean)?;
    info!("train {} / val {} / test {} images", train.len(), val.len(), test.len());

    let dir = match &args.run_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            d.clone()
        }
        None => create_run_dir(&cfg.out_dir, cfg.seed)?,
    };
    fs::write(dir.join("config.json"), cfg.to_json()?)?;

    let mut model = Model::build(cfg.arch.clone(), cfg.seed)?;
    let log = trainer::fit(&mut model, &train, &val, &cfg.train)?;
    fs::write(dir.join("epochs.csv"), log.csv())?;
    if !log.source.is_empty() {
        fs::write(dir.join("pretrain.csv"), log.source_csv())?;
    }
    trainer::save_model(&model, &dir.join("model.dscn"))?;
    let report = trainer::evaluate(&mut model, &test, cfg.train.batch_size)?;
    fs::write(
        dir.join("test_report.csv"),
        format!("{REPORT_HEADER}\n{}\n", metrics::report_row("test", &report)),
    )?;
    info!("test F-score {:.4}, AUC {:?}", report.f_score, report.auc);
    Ok(dir)
}
