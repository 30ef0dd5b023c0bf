use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cosmix_core::autodiff::OpKind;
use cosmix_core::config::RunConfig;
use cosmix_core::dataset::{
    build_manifest, synth_dataset, trim_by_speaker, wav_duration_secs, write_synthetic_tree, Corpus,
    DatasetManifest, KeywordLabel, Split,
};
use cosmix_core::fsutil::write_atomic;
use cosmix_core::model::{load_checkpoint, save_checkpoint, Checkpoint, KeywordModel};
use cosmix_core::trainer::{evaluate, export_embeddings, train as train_run, FeatureCache, Mode, Trainer};
use cosmix_core::verify::{run_verify, VerifyOptions};
use cosmix_core::{rng, Error};
use rayon::prelude::*;

use crate::{AblateArgs, CheckpointSource, EvalArgs, ExportArgs, Failure, PrepareArgs, TrainArgs, VerifyArgs};

type CmdResult = Result<(), Failure>;

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.jsonl";
const LAST_CKPT: &str = "last.ckpt";
const BEST_CKPT: &str = "best.ckpt";
const RUN_FILES: [&str; 4] = [CONFIG_FILE, METRICS_FILE, LAST_CKPT, BEST_CKPT];

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::from_str(s).map_err(Failure::from)
}

fn is_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_none()).unwrap_or(false)
}

pub fn prepare(args: PrepareArgs) -> CmdResult {
    let root = &args.data_root;
    if args.synthetic {
        if root.exists() && !is_empty_dir(root) {
            return Err(usage(format!(
                "{} is not empty; synthetic data needs a new directory",
                root.display()
            )));
        }
        fs::create_dir_all(root).map_err(|e| usage(format!("{}: {e}", root.display())))?;
        let corpus = synth_dataset(args.per_class, args.noise, args.seed)?;
        write_synthetic_tree(&corpus, root)?;
    }
    if !root.is_dir() {
        return Err(usage(format!("data root {} is not a directory", root.display())));
    }
    let val = args.validation_list.unwrap_or_else(|| root.join("validation_list.txt"));
    let test = args.testing_list.unwrap_or_else(|| root.join("testing_list.txt"));
    let full = build_manifest(root, val, test)?;
    let manifest = trim_by_speaker(&full, args.fraction, args.seed)?;

    let mut seconds = [0.0f64; 10];
    let mut counts = [0usize; 10];
    for e in manifest.entries.iter().filter(|e| e.split == Split::Train) {
        seconds[e.label.index()] += wav_duration_secs(&e.path)?;
        counts[e.label.index()] += 1;
    }
    write_atomic(&args.manifest, manifest.to_text().as_bytes())?;

    out!("keyword  train_utterances  minutes");
    for label in KeywordLabel::all() {
        let k = label.index();
        out!("{:<8} {:>16}  {:>7.2}", label.name(), counts[k], seconds[k] / 60.0);
    }
    out!(
        "train {} / validation {} / test {} utterances written to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        manifest.count(Split::Test),
        args.manifest.display()
    );
    Ok(())
}

fn config_text(run: &RunConfig, mode: Mode) -> String {
    format!("# mode = {mode}\n{}", run.to_text())
}

/// Lines of an existing metrics stream, cut to the first `epochs` records.
fn metrics_prefix(path: &Path, epochs: u32) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = text.lines().map(|l| format!("{l}\n")).collect();
    if lines.len() < epochs as usize {
        return Err(usage(format!(
            "{} has {} records but the checkpoint is at epoch {epochs}",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines.into_iter().take(epochs as usize).collect())
}

pub fn train(args: TrainArgs) -> CmdResult {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let dir = &args.run_dir;
    let metrics_path = dir.join(METRICS_FILE);

    let (ckpt, mut lines) = if args.resume {
        let mut ckpt = load_checkpoint(dir.join(LAST_CKPT))?;
        if args.mode != ckpt.meta.mode {
            return Err(usage(format!(
                "run was trained with mode {} but --mode is {}",
                ckpt.meta.mode, args.mode
            )));
        }
        if let Some(e) = args.epochs {
            ckpt.config.train.epochs = e;
        }
        if args.seed.is_some() {
            return Err(usage("--seed cannot change a resumed run"));
        }
        ckpt.config.validate()?;
        let lines = metrics_prefix(&metrics_path, ckpt.meta.epoch)?;
        (Some(ckpt), lines)
    } else {
        if RUN_FILES.iter().any(|f| dir.join(f).exists()) {
            if !args.force {
                return Err(usage(format!(
                    "{} already holds a run; pass --force to replace it or --resume to continue it",
                    dir.display()
                )));
            }
            for f in RUN_FILES {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                }
            }
        }
        (None, Vec::new())
    };

    let run = match &ckpt {
        Some(c) => c.config.clone(),
        None => {
            let mut run = match &args.config {
                Some(p) => RunConfig::read(p)?,
                None => RunConfig::default(),
            };
            if let Some(e) = args.epochs {
                run.train.epochs = e;
            }
            if let Some(s) = args.seed {
                run.train.seed = s;
                run.model.init_seed = s;
            }
            run.validate()?;
            run
        }
    };

    let corpus = Corpus::load(manifest, &[Split::Train, Split::Validation])?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::from_checkpoint(&corpus, c)?,
        None => Trainer::new(&corpus, run.clone(), args.mode)?,
    };
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    write_atomic(dir.join(CONFIG_FILE), config_text(&run, args.mode).as_bytes())?;

    while !trainer.is_finished() {
        let m = trainer.run_epoch()?;
        lines.push(m.to_json_line());
        write_atomic(&metrics_path, lines.concat().as_bytes())?;
        let ck = trainer.checkpoint();
        save_checkpoint(dir.join(LAST_CKPT), &ck)?;
        if trainer.is_best() {
            save_checkpoint(dir.join(BEST_CKPT), &ck)?;
        }
        log::info!("epoch {} of {} done", m.epoch, run.train.epochs);
    }
    let last = trainer.checkpoint();
    out!(
        "trained {} epochs ({}); best val_acc {:.4} at epoch {}",
        last.meta.epoch,
        last.meta.mode,
        last.meta.best_val_acc.unwrap_or(0.0),
        last.meta.best_epoch
    );
    Ok(())
}

fn resolve_checkpoint(source: &CheckpointSource) -> Result<PathBuf, Failure> {
    match (&source.checkpoint, &source.run_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(BEST_CKPT)),
        (None, None) => Err(usage("pass --checkpoint or --run-dir")),
    }
}

fn split_cache(manifest_path: &Path, split: Split) -> Result<FeatureCache, Failure> {
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.count(split) == 0 {
        return Err(usage(format!("split {split} of {} is empty", manifest_path.display())));
    }
    let corpus = Corpus::load(manifest, &[split])?;
    Ok(FeatureCache::build(&corpus, split)?)
}

fn beside(path: &Path, name: String) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn eval(args: EvalArgs) -> CmdResult {
    let split = parse_split(&args.split)?;
    let ckpt_path = resolve_checkpoint(&args.source)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let cache = split_cache(&args.manifest, split)?;
    let model = KeywordModel::new(ckpt.config.model.clone())?;
    let report = evaluate(&model, &ckpt.params, &cache, ckpt.config.train.eval_batch_size)?;
    let out = args.output.unwrap_or_else(|| beside(&ckpt_path, format!("confusion_{split}.csv")));
    write_atomic(&out, report.confusion.to_csv().as_bytes())?;
    out!("accuracy {:.4}", report.accuracy);
    out!(
        "{} of {} {split} utterances correct; confusion matrix written to {}",
        report.confusion.trace(),
        report.confusion.total(),
        out.display()
    );
    Ok(())
}

pub fn export(args: ExportArgs) -> CmdResult {
    let split = parse_split(&args.split)?;
    let ckpt_path = resolve_checkpoint(&args.source)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let cache = split_cache(&args.manifest, split)?;
    let model = KeywordModel::new(ckpt.config.model.clone())?;
    let out = args.output.unwrap_or_else(|| beside(&ckpt_path, format!("embeddings_{split}.csv")));
    let n = export_embeddings(&model, &ckpt.params, &cache, ckpt.config.train.eval_batch_size, &out)?;
    out!("{n} embeddings written to {}", out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    ratio: f64,
    alpha: f64,
    mode: Mode,
}

impl Cell {
    fn key(&self) -> String {
        format!("{}_ratio{}_alpha{}", self.mode, self.ratio, self.alpha)
    }

    /// Depends only on the base seed and the cell itself, not on grid order.
    fn seed(&self, base: u64) -> u64 {
        rng::derive_seed(&[base, rng::str_key(&self.key())])
    }
}

fn run_cell(corpus: &Corpus, test: &FeatureCache, base: &RunConfig, cell: Cell, seed: u64) -> Result<(f64, String), Error> {
    let mut run = base.clone();
    run.train.beta_params.mix_ratio = cell.ratio;
    run.train.beta_params.alpha = cell.alpha;
    run.train.seed = seed;
    run.model.init_seed = seed;
    run.validate()?;
    let outcome = train_run(corpus, &run, cell.mode)?;
    let best: Checkpoint = outcome.best;
    let model = KeywordModel::new(run.model.clone())?;
    let report = evaluate(&model, &best.params, test, run.train.eval_batch_size)?;
    let metrics = outcome.history.iter().map(|m| m.to_json_line()).collect::<String>();
    Ok((report.accuracy, metrics))
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    if args.ratios.is_empty() || args.alphas.is_empty() || args.modes.is_empty() {
        return Err(usage("the ablation grid is empty"));
    }
    let table_path = args.run_dir.join("ablation.csv");
    if table_path.exists() && !args.force {
        return Err(usage(format!(
            "{} exists; pass --force to replace it",
            table_path.display()
        )));
    }
    let mut base = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = args.epochs {
        base.train.epochs = e;
    }
    base.validate()?;

    let manifest = DatasetManifest::read(&args.manifest)?;
    let corpus = Corpus::load(manifest, &[Split::Train, Split::Validation, Split::Test])?;
    let test = FeatureCache::build(&corpus, Split::Test)?;
    if test.is_empty() {
        return Err(usage("test split is empty"));
    }
    let cells_dir = args.run_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| usage(format!("{}: {e}", cells_dir.display())))?;

    let mut cells = Vec::new();
    for &ratio in &args.ratios {
        for &mode in &args.modes {
            for &alpha in &args.alphas {
                cells.push(Cell { ratio, alpha, mode });
            }
        }
    }
    let results: Vec<Result<f64, Error>> = cells
        .par_iter()
        .map(|&cell| {
            let (acc, metrics) = run_cell(&corpus, &test, &base, cell, cell.seed(args.seed))?;
            write_atomic(cells_dir.join(format!("{}.jsonl", cell.key())), metrics.as_bytes())?;
            Ok(acc)
        })
        .collect();

    let mut table = String::from("mix_ratio");
    for mode in &args.modes {
        for alpha in &args.alphas {
            write!(table, ",{mode}_alpha_{alpha}").expect("string write");
        }
    }
    table.push('\n');
    let per_row = args.modes.len() * args.alphas.len();
    let mut failures = Vec::new();
    for (row, chunk) in cells.chunks(per_row).zip(results.chunks(per_row)) {
        write!(table, "{}", row[0].ratio).expect("string write");
        for (cell, r) in row.iter().zip(chunk) {
            match r {
                Ok(acc) => write!(table, ",{acc:.4}").expect("string write"),
                Err(e) => {
                    table.push_str(",failed");
                    failures.push(format!("{}: {e}", cell.key()));
                }
            }
        }
        table.push('\n');
    }
    write_atomic(&table_path, table.as_bytes())?;
    print!("{table}");
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            eprintln!("cell failed: {f}");
        }
        Err(Failure::Numeric(format!("{} of {} cells failed", failures.len(), cells.len())))
    }
}

pub fn verify(args: VerifyArgs) -> CmdResult {
    let sabotage = match args.sabotage.as_deref() {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown primitive `{name}`")))?),
    };
    let report = run_verify(&VerifyOptions {
        sabotage,
        seed: args.seed,
    });
    print!("{}", report.to_text());
    out!("{} suites in {:.1} s", report.suites.len(), report.seconds);
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|s| s.name.as_str()).collect();
        Err(Failure::Check(format!("verification failed: {}", names.join(", "))))
    }
}
