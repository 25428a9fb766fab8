//! Command-line surface: training, inference, evaluation, parameter audits,
//! and synthetic-data generation. All commands share one `key = value`
//! configuration; flags mirror the config keys.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ganmbd::checkpoint::Checkpoint;
use ganmbd::data::{
    centroid_match, detect_centroids, load_dataset, load_image_png, make_refiner_pairs,
    save_image_grid, save_image_png, Dataset, MaskRule,
};
use ganmbd::eval::{
    audit_branch_scaling, audit_csv, count_parameters, default_splits, inception_score,
    pix2pix_audit, stargan_audit_spec, train_eval_classifier,
};
use ganmbd::networks::Discriminator;
use ganmbd::synth::{synth_generate, write_dataset, SyntheticSpec};
use ganmbd::train::{RefinerModel, RefinerTrainConfig, RefinerTrainer};
use ganmbd::{
    Error, GanModel, ModelKind, ParamStore, Result, RunConfig, Tensor, TrainState, Trainer,
};

/// Declares one `Option<String>` flag per configuration key; flag names are
/// exactly the config keys.
macro_rules! override_keys {
    ($($field:ident),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct Overrides {
            /// Config file with `key = value` lines (later flags override it).
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long = stringify!($field), value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn resolve(&self) -> Result<RunConfig> {
                let mut cfg = RunConfig::default();
                if let Some(path) = &self.config {
                    let text = fs::read_to_string(path)?;
                    cfg.apply_str(&text)?;
                }
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                // the only environment variable: relocate all outputs
                if let Ok(root) = std::env::var("GANMBD_OUT_ROOT") {
                    cfg.out_dir = Path::new(&root).join(&cfg.out_dir);
                }
                cfg.validate()?;
                Ok(cfg)
            }
        }
    };
}

override_keys!(
    seed,
    out_dir,
    data_root,
    image_side,
    train_fraction,
    num_classes,
    branches,
    disc_base_channels,
    disc_layers,
    head_channels,
    max_channels,
    gen_base_channels,
    n_downsample,
    n_res_blocks,
    epochs,
    batch_size,
    lr,
    beta1,
    beta2,
    recycling,
    lambda_cls,
    lambda_cyc,
    gen_adv,
    checkpoint_every,
    model,
    refiner_low_side,
    refiner_base_channels,
    lambda_l1,
    synth_count,
    synth_noise,
    classifier_epochs,
    checkpoint,
    input_dir,
    target_class,
    splits,
);

#[derive(Parser)]
#[command(name = "ganmbd", about = "Conditional image translation with a multi-branch discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the translation GAN (or the refiner with `model = refiner`).
    Train(Overrides),
    /// Translate a directory-per-class of images to a target class.
    Translate(Overrides),
    /// Second generator pass over translated images (target label at both
    /// conditioning points).
    Recycle(Overrides),
    /// Apply a trained refiner to a directory of images.
    Refine(Overrides),
    /// Inception score, target-class accuracy, and centroid statistics of a
    /// trained model on the held-out split.
    Evaluate(Overrides),
    /// Parameter-count tables for the multi-branch discriminator.
    AuditParams(Overrides),
    /// Generate the synthetic shape dataset on disk.
    SynthData(Overrides),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(o) => o.resolve().and_then(run_train),
        Command::Translate(o) => o.resolve().and_then(run_translate),
        Command::Recycle(o) => o.resolve().and_then(run_recycle),
        Command::Refine(o) => o.resolve().and_then(run_refine),
        Command::Evaluate(o) => o.resolve().and_then(run_evaluate),
        Command::AuditParams(o) => o.resolve().and_then(run_audit),
        Command::SynthData(o) => o.resolve().and_then(run_synth),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Write the resolved config next to the command's outputs.
fn echo_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn run_train(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    match cfg.model {
        ModelKind::Gan => train_gan(&cfg),
        ModelKind::Refiner => train_refiner(&cfg),
    }
}

fn check_class_count(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.num_classes() != cfg.num_classes {
        return Err(Error::config(format!(
            "num_classes = {} but the dataset at {} has {} classes",
            cfg.num_classes,
            cfg.data_root.display(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

fn train_gan(cfg: &RunConfig) -> Result<()> {
    let (train, test) = load_dataset(&cfg.dataset_spec(), cfg.seed)?;
    check_class_count(cfg, &train)?;
    println!(
        "training on {} images ({} held out), {} classes, {} branches",
        train.len(),
        test.len(),
        train.num_classes(),
        cfg.branches
    );

    let mut model = GanModel::build(cfg.gen_spec(), cfg.disc_spec(), cfg.seed)?;
    let mut trainer = Trainer::new(&model, cfg.train_config())?;

    // fixed batch for the per-checkpoint sample grids
    let sample_src = if test.is_empty() { &train } else { &test };
    let sample_idx: Vec<usize> = (0..sample_src.len().min(8)).collect();
    let sample_images = sample_src.batch(&sample_idx)?;
    let sample_labels: Vec<usize> = sample_idx.iter().map(|&i| sample_src.labels[i]).collect();
    let k = cfg.num_classes;

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let out_dir = cfg.out_dir.clone();
    let every = cfg.checkpoint_every.max(1);
    let total = cfg.epochs;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::create_dir_all(out_dir.join("samples"))?;

    trainer.train_loop(&mut model, &train, |tr, model| {
        let epoch = tr.state.epoch;
        write_history_csv(&out_dir.join("history.csv"), &tr.state, steps_per_epoch)?;
        let last = tr.state.history.last().unwrap();
        println!(
            "epoch {epoch:>4}/{total}  adv_d {:+.4}  adv_g {:+.4}  cls_real {:.4}  cls_fake {:.4}  cyc {:.4}  ({:.1}s/1k)",
            last.adv_d, last.adv_g, last.cls_real, last.cls_fake, last.cyc, tr.state.sec_per_1k()
        );
        if epoch % every == 0 || epoch == total {
            let dir = out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"));
            tr.save_checkpoint(model, &dir)?;
            write_class_names(&dir, &train.class_names)?;
            let targets: Vec<usize> = sample_labels.iter().map(|&s| (s + 1) % k).collect();
            let fake = model.translate(&sample_images, &sample_labels, &targets)?;
            save_image_grid(&fake, 4, &out_dir.join("samples").join(format!("epoch_{epoch:04}.png")))?;
        }
        Ok(())
    })?;

    let final_dir = out_dir.join("checkpoint");
    trainer.save_checkpoint(&model, &final_dir)?;
    write_class_names(&final_dir, &train.class_names)?;
    println!("final checkpoint: {}", final_dir.display());
    Ok(())
}

fn write_history_csv(path: &Path, state: &TrainState, steps_per_epoch: usize) -> Result<()> {
    let mut out = String::from("step, epoch, adv_d, adv_g, cls_real, cls_fake, cyc, sec_per_1k\n");
    for (i, r) in state.history.iter().enumerate() {
        let epoch = i / steps_per_epoch + 1;
        let sec_1k = state.step_seconds.get(i).copied().unwrap_or(0.0) * 1000.0;
        out.push_str(&format!(
            "{}, {}, {}, {}, {}, {}, {}, {}\n",
            i + 1,
            epoch,
            r.adv_d,
            r.adv_g,
            r.cls_real,
            r.cls_fake,
            r.cyc,
            sec_1k
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn train_refiner(cfg: &RunConfig) -> Result<()> {
    let (train, test) = load_dataset(&cfg.dataset_spec(), cfg.seed)?;
    let pairs = make_refiner_pairs(&train, cfg.refiner_low_side)?;
    println!("training refiner on {} degraded/original pairs", pairs.len());
    let mut model = RefinerModel::build(cfg.refiner_base_channels, cfg.image_side, cfg.seed)?;
    let rcfg = RefinerTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        lambda_l1: cfg.lambda_l1,
        seed: cfg.seed,
    };
    let mut trainer = RefinerTrainer::new(&model, rcfg)?;
    let total = cfg.epochs;
    trainer.train_loop(&mut model, &pairs, |epoch, tr, _| {
        let last = tr.history.last().unwrap();
        println!(
            "epoch {epoch:>4}/{total}  adv_d {:+.4}  adv_g {:+.4}  l1 {:.4}",
            last.adv_d, last.adv_g, last.l1
        );
        Ok(())
    })?;

    let mut out = String::from("step, adv_d, adv_g, l1, total_g\n");
    for (i, r) in trainer.history.iter().enumerate() {
        out.push_str(&format!("{}, {}, {}, {}, {}\n", i + 1, r.adv_d, r.adv_g, r.l1, r.total_g));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("refiner_history.csv"), out)?;

    let final_dir = cfg.out_dir.join("checkpoint");
    model.save(&final_dir)?;
    println!("refiner checkpoint: {}", final_dir.display());

    // quick held-out sanity figure: degraded vs refined on a few test images
    if !test.is_empty() {
        let idx: Vec<usize> = (0..test.len().min(4)).collect();
        let batch = test.batch(&idx)?;
        let degraded = ganmbd::data::block_degrade(&batch, cfg.refiner_low_side)?;
        let refined = model.refine(&degraded)?;
        save_image_grid(&refined, 4, &cfg.out_dir.join("refined_samples.png"))?;
    }
    Ok(())
}

fn write_class_names(dir: &Path, names: &[String]) -> Result<()> {
    fs::write(dir.join("classes.txt"), names.join("\n") + "\n")?;
    Ok(())
}

fn read_class_names(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join("classes.txt"))
        .map_err(|_| Error::checkpoint(format!("{}: missing classes.txt", dir.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

// ---------------------------------------------------------------------------
// inference commands
// ---------------------------------------------------------------------------

/// Rebuild the GAN from the run config and load checkpointed weights,
/// cross-checking the checkpoint's recorded shape metadata first.
fn load_gan(cfg: &RunConfig) -> Result<(GanModel, Vec<String>)> {
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(Error::usage("checkpoint is required (set `checkpoint = <dir>`)"));
    }
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let k: usize = ck.meta_parsed("num_classes")?;
    if k != cfg.num_classes {
        return Err(Error::config(format!(
            "checkpoint was trained with {k} classes, config says {}",
            cfg.num_classes
        )));
    }
    let side: usize = ck.meta_parsed("image_side")?;
    if side != cfg.image_side {
        return Err(Error::config(format!(
            "checkpoint was trained at {side}x{side}, config says {}",
            cfg.image_side
        )));
    }
    let branches: usize = ck.meta_parsed("branches")?;
    if branches != cfg.branches {
        return Err(Error::config(format!(
            "checkpoint has {branches} discriminator branches, config says {}",
            cfg.branches
        )));
    }
    let mut model = GanModel::build(cfg.gen_spec(), cfg.disc_spec(), 0)?;
    ck.restore_store("", &mut model.store)?;
    let names = read_class_names(&cfg.checkpoint)?;
    Ok((model, names))
}

fn class_index(names: &[String], wanted: &str) -> Result<usize> {
    if wanted.is_empty() {
        return Err(Error::usage("target_class is required"));
    }
    names
        .iter()
        .position(|n| n == wanted)
        .ok_or_else(|| Error::usage(format!("unknown target_class {wanted:?} (classes: {})", names.join(", "))))
}

/// Flat directory of PNGs, sorted by file name.
fn load_flat_dir(dir: &Path, side: usize) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::usage(format!("{}: no PNG files", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, load_image_png(&p, side)?))
        })
        .collect()
}

fn run_translate(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    let (model, names) = load_gan(&cfg)?;
    let target = class_index(&names, &cfg.target_class)?;
    if cfg.input_dir.as_os_str().is_empty() {
        return Err(Error::usage("input_dir is required"));
    }
    let spec = ganmbd::DatasetSpec {
        root: cfg.input_dir.clone(),
        class_names: vec![],
        image_side: cfg.image_side,
        train_fraction: 1.0,
    };
    let (inputs, _) = load_dataset(&spec, cfg.seed)?;
    if inputs.class_names != names {
        return Err(Error::config(format!(
            "input classes ({}) do not match the checkpoint's ({})",
            inputs.class_names.join(", "),
            names.join(", ")
        )));
    }
    let out = cfg.out_dir.join("translated");
    fs::create_dir_all(&out)?;
    let side = cfg.image_side;
    for (i, (img, &src)) in inputs.images.iter().zip(&inputs.labels).enumerate() {
        let batch = img.clone().reshaped(vec![1, 3, side, side])?;
        let fake = model.translate(&batch, &[src], &[target])?;
        let fake = fake.reshaped(vec![3, side, side])?;
        save_image_png(&fake, &out.join(format!("{}_{i:04}_to_{}.png", names[src], names[target])))?;
    }
    println!("translated {} images into {}", inputs.len(), out.display());
    Ok(())
}

fn run_recycle(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    let (model, names) = load_gan(&cfg)?;
    let target = class_index(&names, &cfg.target_class)?;
    if cfg.input_dir.as_os_str().is_empty() {
        return Err(Error::usage("input_dir is required"));
    }
    let inputs = load_flat_dir(&cfg.input_dir, cfg.image_side)?;
    let out = cfg.out_dir.join("recycled");
    fs::create_dir_all(&out)?;
    let side = cfg.image_side;
    for (name, img) in &inputs {
        let batch = img.clone().reshaped(vec![1, 3, side, side])?;
        let again = model.recycle(&batch, &[target])?;
        save_image_png(&again.reshaped(vec![3, side, side])?, &out.join(name))?;
    }
    println!("recycled {} images into {}", inputs.len(), out.display());
    Ok(())
}

fn run_refine(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(Error::usage("checkpoint is required (set `checkpoint = <dir>`)"));
    }
    if cfg.input_dir.as_os_str().is_empty() {
        return Err(Error::usage("input_dir is required"));
    }
    let model = RefinerModel::load(&cfg.checkpoint)?;
    if model.refiner.image_side != cfg.image_side {
        return Err(Error::config(format!(
            "refiner was trained at {0}x{0}, config says {1}",
            model.refiner.image_side, cfg.image_side
        )));
    }
    let inputs = load_flat_dir(&cfg.input_dir, cfg.image_side)?;
    let out = cfg.out_dir.join("refined");
    fs::create_dir_all(&out)?;
    let side = cfg.image_side;
    for (name, img) in &inputs {
        let batch = img.clone().reshaped(vec![1, 3, side, side])?;
        let refined = model.refine(&batch)?;
        save_image_png(&refined.reshaped(vec![3, side, side])?, &out.join(name))?;
    }
    println!("refined {} images into {}", inputs.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn run_evaluate(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    let (model, names) = load_gan(&cfg)?;
    let (train, test) = load_dataset(&cfg.dataset_spec(), cfg.seed)?;
    check_class_count(&cfg, &train)?;
    if train.class_names != names {
        return Err(Error::config(format!(
            "dataset classes ({}) do not match the checkpoint's ({})",
            train.class_names.join(", "),
            names.join(", ")
        )));
    }
    if test.is_empty() {
        return Err(Error::config("evaluation needs a held-out split (train_fraction < 1)"));
    }
    println!("certifying the evaluation classifier ({} epochs)...", cfg.classifier_epochs);
    let clf = train_eval_classifier(&train, &test, cfg.classifier_epochs, cfg.seed)?;
    println!("classifier held-out accuracy: {:.1}%", 100.0 * clf.accuracy);

    // translate every held-out image to the next class, round robin
    let k = cfg.num_classes;
    let side = cfg.image_side;
    let targets: Vec<usize> = test.labels.iter().map(|&s| (s + 1) % k).collect();
    let mut translated = Tensor::zeros(vec![test.len(), 3, side, side]);
    let per = 3 * side * side;
    let chunk = 16;
    for start in (0..test.len()).step_by(chunk) {
        let end = (start + chunk).min(test.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = test.batch(&idx)?;
        let srcs: Vec<usize> = idx.iter().map(|&i| test.labels[i]).collect();
        let fake = model.translate(&batch, &srcs, &targets[start..end])?;
        translated.data_mut()[start * per..end * per].copy_from_slice(fake.data());
    }

    let accuracy = clf.accuracy_on(&translated, &targets)?;
    let probs = clf.predict_probs(&translated)?;
    // per-direction breakdown: which source -> target pairs succeed
    let mut dir_hits = vec![0usize; k];
    let mut dir_totals = vec![0usize; k];
    for i in 0..test.len() {
        let row = &probs.data()[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        dir_totals[test.labels[i]] += 1;
        if pred == targets[i] {
            dir_hits[test.labels[i]] += 1;
        }
    }
    let splits = if cfg.splits == 0 { default_splits(test.len()) } else { cfg.splits };
    let is = inception_score(&probs, splits)?;

    // centroid statistics against object positions detected in the sources
    let rule = MaskRule::default();
    let mut displacements = Vec::new();
    let mut matches = 0usize;
    for (i, src_img) in test.images.iter().enumerate() {
        let centers = detect_centroids(src_img, &rule)?;
        let fake = Tensor::from_vec(
            vec![3, side, side],
            translated.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let rep = centroid_match(&centers, &fake, &rule)?;
        displacements.extend(rep.displacements);
        if rep.count_match {
            matches += 1;
        }
    }
    displacements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = displacements.get(displacements.len() / 2).copied();
    let count_rate = matches as f64 / test.len() as f64;

    let mut report = String::new();
    report.push_str(&format!("held-out images: {}\n", test.len()));
    report.push_str(&format!("target-class accuracy: {:.4}\n", accuracy));
    for s in 0..k {
        if dir_totals[s] > 0 {
            report.push_str(&format!(
                "  {} -> {}: {:.4}\n",
                names[s],
                names[(s + 1) % k],
                dir_hits[s] as f64 / dir_totals[s] as f64
            ));
        }
    }
    report.push_str(&format!(
        "inception score: {:.4} +/- {:.4} ({} splits)\n",
        is.mean, is.std, is.splits
    ));
    match median {
        Some(m) => report.push_str(&format!("median centroid displacement: {:.2} px\n", m)),
        None => report.push_str("median centroid displacement: n/a (no objects detected)\n"),
    }
    report.push_str(&format!("object-count match rate: {:.4}\n", count_rate));
    print!("{report}");
    fs::write(cfg.out_dir.join("report.txt"), report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// audit-params
// ---------------------------------------------------------------------------

fn run_audit(cfg: RunConfig) -> Result<()> {
    echo_config(&cfg)?;
    let n_list = [1usize, 2, 4, 8];
    let rows = audit_branch_scaling(stargan_audit_spec, &n_list)?;
    println!("multi-branch discriminator (audit configuration, 128x128, 5 classes):");
    println!("{:>8} {:>14} {:>18} {:>8}", "branches", "disc_params", "hidden_connects", "ratio");
    for r in &rows {
        println!(
            "{:>8} {:>14} {:>18} {:>8.4}",
            r.branches, r.total, r.hidden_connections, r.ratio_to_single
        );
    }
    let p2p = pix2pix_audit();
    println!("\npix2pix patch discriminator: {} params", p2p.total);

    // detailed per-layer table for the configured branch count
    let mut store = ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let disc = Discriminator::build(stargan_audit_spec(cfg.branches), &mut store, "d", &mut rng)?;
    println!("\nper-layer table, {} branches:\n{}", cfg.branches, count_parameters(&disc).table());

    let mut csv_rows: Vec<(String, usize, usize, usize)> = rows
        .iter()
        .map(|r| ("gan-mbd".to_string(), r.branches, r.total, r.total))
        .collect();
    csv_rows.push(("pix2pix".to_string(), 1, p2p.total, p2p.total));
    fs::write(cfg.out_dir.join("audit.csv"), audit_csv(&csv_rows))?;
    println!("wrote {}", cfg.out_dir.join("audit.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

fn run_synth(cfg: RunConfig) -> Result<()> {
    let mut spec = SyntheticSpec::desk_default(cfg.image_side);
    spec.noise = cfg.synth_noise;
    let ds = synth_generate(&spec, cfg.synth_count, cfg.seed)?;
    write_dataset(&ds, &cfg.data_root)?;
    println!(
        "wrote {} images across {} classes to {}",
        ds.dataset.len(),
        ds.dataset.num_classes(),
        cfg.data_root.display()
    );
    Ok(())
}
