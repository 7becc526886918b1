//! `lesionlab` command-line interface.
//!
//! Subcommands: `ontology validate`, `mine`, `synth`, `dataset split`,
//! `train`, `eval`, `predict`. Exit codes: 0 success, 1 usage, 2 data error.

mod config;
mod manifest;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array3;

use lesionlab::dataset::{
    build_corpus, filter_labels, label_stats_from_vectors, patient_split, read_records,
    synth_generate, write_records, LabelSubset, LesionRecord, MinedRecord,
};
use lesionlab::eval::{category_report, per_label_auc, per_label_csv, roc_csv, summary_csv, topk_report};
use lesionlab::loss::class_weights;
use lesionlab::model::{
    forward, load_checkpoint, predict_topk, save_checkpoint, train, NetworkConfig, Rect, TrainSet,
};
use lesionlab::ontology::{Category, LabelVector, Ontology};
use lesionlab::preprocess::{load_patches, save_patches};
use lesionlab::textmine::{mine_label_set, Sentence};

use config::KeyValues;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "lesionlab", version, about = "Lesion annotation toolkit")]
struct Cli {
    /// Worker threads for mining and evaluation (1 = fully serial).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<KeyValues> {
        config::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Lexicon utilities.
    Ontology {
        #[command(subcommand)]
        command: OntologyCommand,
    },
    /// Mine expanded label sets from a record corpus.
    Mine {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output JSONL path (one `{lesion_id, label_ids, label_names}` per line).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with controlled label noise.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Corpus utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train a model on a mined corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Patch stack aligned with the training records.
        #[arg(long)]
        train_patches: PathBuf,
        /// Test records; used only to select the trained label subset.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a trained model: per-label and summary AUC tables.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory of a `train` run (checkpoint + labels + config).
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        test_patches: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write per-label ROC point CSVs.
        #[arg(long)]
        roc: bool,
    },
    /// Print the top-k predictions for one record with TP/FP/FN tags.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        /// Lesion id to predict; defaults to the first record.
        #[arg(long)]
        lesion_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum OntologyCommand {
    /// Load and validate a lexicon, printing a short report.
    Validate { lexicon: PathBuf },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Patient-disjoint split of a corpus (and optional patch stack).
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, not usage errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        let _ = lesionlab::configure_threads(n);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ontology { command } => match command {
            OntologyCommand::Validate { lexicon } => cmd_ontology_validate(&lexicon),
        },
        Command::Mine { lexicon, corpus, out } => cmd_mine(&lexicon, &corpus, &out),
        Command::Synth { cfg, out_dir } => cmd_synth(&cfg.resolve()?, &out_dir),
        Command::Dataset { command } => match command {
            DatasetCommand::Split {
                corpus,
                patches,
                fraction,
                seed,
                out_dir,
            } => cmd_split(&corpus, patches.as_deref(), fraction, seed, &out_dir),
        },
        Command::Train {
            cfg,
            lexicon,
            train,
            train_patches,
            test,
            out_dir,
        } => cmd_train(&cfg.resolve()?, &lexicon, &train, &train_patches, &test, &out_dir),
        Command::Eval {
            cfg,
            model_dir,
            lexicon,
            test,
            test_patches,
            out_dir,
            roc,
        } => cmd_eval(&cfg.resolve()?, &model_dir, &lexicon, &test, &test_patches, &out_dir, roc),
        Command::Predict {
            cfg,
            model_dir,
            lexicon,
            corpus,
            patches,
            lesion_id,
        } => cmd_predict(&cfg.resolve()?, &model_dir, &lexicon, &corpus, &patches, lesion_id.as_deref()),
    }
}

fn cmd_ontology_validate(lexicon: &Path) -> Result<()> {
    let ontology = Ontology::load(lexicon)?;
    let counts = ontology.category_counts();
    println!("K={}, 0 errors", ontology.num_labels());
    for cat in Category::ALL {
        println!("  {cat}: {}", counts.get(&cat).copied().unwrap_or(0));
    }
    println!("  dag depth: {}", ontology.dag_depth());
    Ok(())
}

fn cmd_mine(lexicon: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let ontology = Ontology::load(lexicon)?;
    let records = read_records(corpus)?;
    let corpus = build_corpus(&records, &ontology);
    let mut file = std::fs::File::create(out)
        .with_context(|| format!("creating {}", out.display()))?;
    use std::io::Write;
    for (record, vector) in &corpus {
        let ids: Vec<usize> = Ontology::to_id_set(vector).into_iter().collect();
        let mined = MinedRecord {
            lesion_id: record.lesion_id.clone(),
            label_names: ids.iter().map(|&i| ontology.label(i).name.clone()).collect(),
            label_ids: ids,
        };
        serde_json::to_writer(&mut file, &mined)?;
        writeln!(file)?;
    }
    println!("mined {} records -> {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_synth(kv: &KeyValues, out_dir: &Path) -> Result<()> {
    let cfg = kv.synth_config()?;
    std::fs::create_dir_all(out_dir)?;
    let out = synth_generate(&cfg)?;

    let lexicon_path = out_dir.join("lexicon.tsv");
    out.ontology.write_lexicon(&lexicon_path)?;
    write_records(out_dir.join("corpus.jsonl"), &out.records)?;
    let (train, test) = out.records.split_at(out.n_train);
    write_records(out_dir.join("train.jsonl"), train)?;
    write_records(out_dir.join("test.jsonl"), test)?;
    save_patches(out_dir.join("patches.f32"), &out.patches)?;
    save_patches(out_dir.join("train.f32"), &out.patches[..out.n_train])?;
    save_patches(out_dir.join("test.f32"), &out.patches[out.n_train..])?;

    Manifest::new("synth", kv)
        .with_input(&lexicon_path)?
        .write(out_dir)?;
    println!(
        "synth: K={} labels, {} train + {} test records, {} leaf mentions dropped of {}",
        out.ontology.num_labels(),
        out.n_train,
        out.records.len() - out.n_train,
        out.stats.dropped_leaves,
        out.stats.leaf_slots
    );
    Ok(())
}

fn cmd_split(
    corpus: &Path,
    patches: Option<&Path>,
    fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let records = read_records(corpus)?;
    let split = patient_split(&records, |r| r.patient_id.as_str(), fraction, seed)?;
    std::fs::create_dir_all(out_dir)?;

    let select = |idx: &[usize]| -> Vec<LesionRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    };
    write_records(out_dir.join("train.jsonl"), &select(&split.train))?;
    write_records(out_dir.join("test.jsonl"), &select(&split.test))?;

    if let Some(patches_path) = patches {
        let stack = load_patches(patches_path)?;
        if stack.len() != records.len() {
            bail!(
                "patch stack holds {} entries but corpus has {} records",
                stack.len(),
                records.len()
            );
        }
        let pick = |idx: &[usize]| -> Vec<Array3<f32>> {
            idx.iter().map(|&i| stack[i].clone()).collect()
        };
        save_patches(out_dir.join("train.f32"), &pick(&split.train))?;
        save_patches(out_dir.join("test.f32"), &pick(&split.test))?;
    }

    let mut kv = KeyValues::default();
    kv.apply_overrides(&[
        format!("split.fraction={fraction}"),
        format!("split.seed={seed}"),
    ])?;
    Manifest::new("dataset split", &kv).with_input(corpus)?.write(out_dir)?;
    println!(
        "split: {} train / {} test records (fraction {:.3})",
        split.train.len(),
        split.test.len(),
        split.test.len() as f64 / records.len() as f64
    );
    Ok(())
}

/// Loads records and their aligned patch stack, converting to model inputs.
fn load_split(
    records_path: &Path,
    patches_path: &Path,
) -> Result<(Vec<LesionRecord>, Vec<Array3<f64>>, Vec<Rect>)> {
    let records = read_records(records_path)?;
    let stack = load_patches(patches_path)?;
    if records.len() != stack.len() {
        bail!(
            "{} has {} records but {} holds {} patches",
            records_path.display(),
            records.len(),
            patches_path.display(),
            stack.len()
        );
    }
    let inputs: Vec<Array3<f64>> = stack.iter().map(|p| p.mapv(f64::from)).collect();
    let bboxes: Vec<Rect> = records.iter().map(|r| Rect::from_array(r.bbox_mm)).collect();
    Ok((records, inputs, bboxes))
}

fn cmd_train(
    kv: &KeyValues,
    lexicon: &Path,
    train_path: &Path,
    train_patches: &Path,
    test_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let ontology = Ontology::load(lexicon)?;
    let (train_records, inputs, bboxes) = load_split(train_path, train_patches)?;
    let test_records = read_records(test_path)?;

    // the trained label set is chosen by test-set frequency, then labels
    // without enough mined training positives are dropped too
    let min_count = kv.eval_min_count()?;
    let test_mined = build_corpus(&test_records, &ontology);
    let mut subset = filter_labels(&test_mined, &ontology, min_count)?;

    let train_mined = build_corpus(&train_records, &ontology);
    let min_train = kv.eval_min_train_count()?;
    let train_counts = label_stats_from_vectors(train_mined.iter().map(|(_, v)| v));
    subset.kept.retain(|&id| train_counts.n_pos[id] > min_train);
    if subset.is_empty() {
        bail!("no label passed both frequency filters");
    }

    let targets: Vec<LabelVector> =
        train_mined.iter().map(|(_, v)| subset.project(v)).collect();
    let stats = label_stats_from_vectors(targets.iter());
    let weights = class_weights(&stats)?;

    let net = kv.network_config(subset.len())?;
    net.validate()?;
    let schedule = kv.schedule()?;
    let loss_cfg = kv.loss_config()?;

    let data = TrainSet {
        inputs: &inputs,
        bboxes: &bboxes,
        targets: &targets,
    };
    let (params, log) = train(&net, &data, &weights, &loss_cfg, &schedule)?;

    std::fs::create_dir_all(out_dir)?;
    save_checkpoint(out_dir.join("checkpoint.bin"), &params)?;
    std::fs::write(
        out_dir.join("labels.json"),
        serde_json::to_string_pretty(&subset)?,
    )?;
    std::fs::write(out_dir.join("config.kv"), kv.render())?;

    let mut loss_csv = String::from("epoch,step,loss,lr\n");
    for s in &log.steps {
        loss_csv.push_str(&format!("{},{},{:.6},{}\n", s.epoch, s.step, s.loss, s.lr));
    }
    std::fs::write(out_dir.join("loss.csv"), loss_csv)?;

    Manifest::new("train", kv)
        .with_input(lexicon)?
        .with_input(train_path)?
        .with_input(train_patches)?
        .with_input(test_path)?
        .write(out_dir)?;

    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} labels for {} epochs; final mean loss {:.4} -> {}",
        subset.len(),
        last.epoch,
        last.mean_loss,
        out_dir.display()
    );
    Ok(())
}

/// Reads the artifacts a `train` run leaves behind.
fn load_model(
    model_dir: &Path,
    kv_fallback: &KeyValues,
) -> Result<(lesionlab::model::Parameters, NetworkConfig, LabelSubset)> {
    let labels: LabelSubset =
        serde_json::from_str(&std::fs::read_to_string(model_dir.join("labels.json"))?)
            .context("reading labels.json")?;
    let config_path = model_dir.join("config.kv");
    let kv = if config_path.exists() {
        config::resolve(Some(&config_path), &[])?
    } else {
        kv_fallback.clone()
    };
    let net = kv.network_config(labels.len())?;
    let params = load_checkpoint(model_dir.join("checkpoint.bin"), &net)?;
    Ok((params, net, labels))
}

/// Ground-truth target in the reduced label space: the record's complete
/// `truth_labels` when present, else its mined sentence labels.
fn reduced_truth(
    record: &LesionRecord,
    ontology: &Ontology,
    subset: &LabelSubset,
) -> LabelVector {
    let full = match &record.truth_labels {
        Some(ids) => {
            let mut v = vec![false; ontology.num_labels()];
            for &id in ids {
                v[id] = true;
            }
            v
        }
        None => {
            let set = mine_label_set(&Sentence::new(record.sentence.clone()), ontology);
            ontology.to_vector(&set)
        }
    };
    subset.project(&full)
}

fn cmd_eval(
    kv: &KeyValues,
    model_dir: &Path,
    lexicon: &Path,
    test_path: &Path,
    test_patches: &Path,
    out_dir: &Path,
    roc: bool,
) -> Result<()> {
    let ontology = Ontology::load(lexicon)?;
    let (params, net, subset) = load_model(model_dir, kv)?;
    let (test_records, inputs, bboxes) = load_split(test_path, test_patches)?;

    let scores: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&bboxes)
        .map(|(input, bbox)| Ok(forward(&net, &params, input, bbox)?.0))
        .collect::<Result<_>>()?;
    let truths: Vec<LabelVector> = test_records
        .iter()
        .map(|r| reduced_truth(r, &ontology, &subset))
        .collect();

    let (mut per_label, skipped) = per_label_auc(&scores, &truths);
    // map reduced ids back to ontology ids for reporting
    for l in &mut per_label {
        l.label_id = subset.kept[l.label_id];
    }
    let skipped: Vec<usize> = skipped.into_iter().map(|i| subset.kept[i]).collect();
    if per_label.is_empty() {
        bail!("no label had both positives and negatives in the test set");
    }
    let report = category_report(per_label, skipped, &ontology);

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("per_label.csv"), per_label_csv(&report, &ontology))?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(&report))?;

    if roc {
        let roc_dir = out_dir.join("roc");
        std::fs::create_dir_all(&roc_dir)?;
        for l in &report.per_label {
            let reduced = subset.index_of(l.label_id).expect("reported label is kept");
            let col_scores: Vec<f64> = scores.iter().map(|row| row[reduced]).collect();
            let col_labels: Vec<bool> = truths.iter().map(|row| row[reduced]).collect();
            let points = lesionlab::eval::roc_points(&col_scores, &col_labels)
                .expect("evaluated label has both classes");
            std::fs::write(roc_dir.join(format!("label_{:03}.csv", l.label_id)), roc_csv(&points))?;
        }
    }

    Manifest::new("eval", kv)
        .with_input(lexicon)?
        .with_input(test_path)?
        .with_input(test_patches)?
        .write(out_dir)?;

    println!(
        "eval: overall AUC {:.4} +/- {:.4} over {} labels ({} skipped)",
        report.overall.mean_auc,
        report.overall.std_auc,
        report.overall.n_labels,
        report.skipped.len()
    );
    for (cat, stat) in &report.per_category {
        println!("  {cat}: {:.4} over {} labels", stat.mean_auc, stat.n_labels);
    }
    Ok(())
}

fn cmd_predict(
    kv: &KeyValues,
    model_dir: &Path,
    lexicon: &Path,
    corpus: &Path,
    patches: &Path,
    lesion_id: Option<&str>,
) -> Result<()> {
    let ontology = Ontology::load(lexicon)?;
    let (params, net, subset) = load_model(model_dir, kv)?;
    let (records, inputs, bboxes) = load_split(corpus, patches)?;

    let idx = match lesion_id {
        Some(id) => records
            .iter()
            .position(|r| r.lesion_id == id)
            .with_context(|| format!("no record with lesion_id {id:?}"))?,
        None => 0,
    };
    let record = &records[idx];
    let (scores, _) = forward(&net, &params, &inputs[idx], &bboxes[idx])?;

    let truth_vec = reduced_truth(record, &ontology, &subset);
    let truth: BTreeSet<usize> = truth_vec
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| i)
        .collect();

    let k = kv.eval_k()?.min(scores.len());
    let report = topk_report(&scores, &truth, k);

    println!("lesion {} ({:?})", record.lesion_id, record.sentence);
    for reduced_id in predict_topk(&scores, k) {
        let tag = if report.tp.contains(&reduced_id) { "TP" } else { "FP" };
        let name = &ontology.label(subset.kept[reduced_id]).name;
        println!("{tag} {name} {:.4}", scores[reduced_id]);
    }
    for &reduced_id in &report.fn_ {
        let name = &ontology.label(subset.kept[reduced_id]).name;
        println!("FN {name} {:.4}", scores[reduced_id]);
    }
    Ok(())
}
