use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use dcg_core::contrastive::DualProjector;
use dcg_core::dataset::{self, Lang, MixComponent, MixSpec, PairSet, Style};
use dcg_core::eval::{self, DirectionChoice, EvalConfig, RetrievalReport};
use dcg_core::synthgen::{self, SynthSpec};
use dcg_core::trainer::{self, AdamConfig, Checkpoint, CheckpointMeta, TrainConfig};
use dcg_core::viz::{self, ScatterGroup};
use dcg_core::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;

/// Projection-head training and cross-modal retrieval benchmarks.
#[derive(Debug, Parser, Serialize)]
#[command(name = "dcg-lab", version)]
struct Cli {
    /// Seed for every random draw. `DCG_LAB_SEED` replaces the default.
    #[arg(long, global = true, env = "DCG_LAB_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,

    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Generate a synthetic manifest with a known linear alignment.
    Synth {
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 16)]
        latent: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value = "descriptive")]
        style: Style,
        #[arg(long, default_value = "other")]
        lang: Lang,
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        /// Seed for the alignment maps; sets sharing it share one alignment.
        #[arg(long, default_value_t = 0)]
        map_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the exact-alignment projector as a checkpoint.
        #[arg(long)]
        analytic_checkpoint: Option<PathBuf>,
    },
    /// Validate a manifest and print a summary.
    Inspect { manifest: PathBuf },
    /// Keep pairs whose text has at least `--min-words` words.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = dataset::DEFAULT_MIN_WORDS)]
        min_words: usize,
    },
    /// Seeded disjoint train/val/test split into OUT/{train,val,test}.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix sources given as LABEL=DIR:COUNT.
    Mix {
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train projection heads with the symmetric contrastive loss.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON); defaults to OUT with a `.log.json` suffix.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        patience: usize,
        #[arg(long)]
        no_early_stop: bool,
        #[arg(long)]
        freeze_logit_scale: bool,
        #[arg(long, default_value_t = 512)]
        dim_out: usize,
    },
    /// Recall@k over seeded populations.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Projector checkpoint; without one, raw backbone cosine is scored.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        pop: Vec<usize>,
        #[arg(long, default_value_t = eval::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25")]
        k: Vec<usize>,
        #[arg(long, default_value = "both")]
        direction: DirectionChoice,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean true-pair minus false-pair cosine per dataset tag.
    Gap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = eval::DEFAULT_GAP_POPULATION)]
        pop: usize,
        #[arg(long, default_value_t = eval::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy deltas between a descriptive and a commentative report.
    Dcg {
        #[arg(long)]
        descriptive: PathBuf,
        #[arg(long)]
        commentative: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k images for one record's text embedding.
    Query {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Record whose text embedding is the query.
        #[arg(long)]
        record: String,
        /// Manifest holding the query record; defaults to `--data`.
        #[arg(long)]
        query_data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// PCA scatter CSV of texts (by style) and images.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Cap on points per group, taken in record order.
        #[arg(long)]
        max_per_group: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Argument("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    validate_inputs(&cli.command)?;
    let run_echo = json!({
        "tool": "dcg-lab",
        "version": env!("CARGO_PKG_VERSION"),
        "args": serde_json::to_value(cli)?,
    });
    let seed = cli.seed;

    match &cli.command {
        Command::Synth {
            pairs,
            latent,
            dim,
            noise,
            style,
            lang,
            dataset,
            map_seed,
            out,
            analytic_checkpoint,
        } => {
            let spec = SynthSpec {
                n_pairs: *pairs,
                latent_dim: *latent,
                backbone_dim: *dim,
                noise_sigma: *noise,
                style: *style,
                dataset: dataset.clone(),
                lang: *lang,
                seed,
                map_seed: *map_seed,
            };
            let data = synthgen::generate_with_maps(&spec)?;
            dataset::save_manifest(&data.set, out)?;
            if let Some(path) = analytic_checkpoint {
                let ckpt = Checkpoint {
                    projector: data.maps.analytic_projector(),
                    meta: CheckpointMeta {
                        config: TrainConfig {
                            seed,
                            d_out: *latent,
                            ..Default::default()
                        },
                        best_val_loss: f64::NAN,
                        epoch_reached: 0,
                        best_epoch: 0,
                    },
                };
                trainer::save_checkpoint(&ckpt, path)?;
            }
            print_json(&json!({"run": run_echo, "summary": summarize(&data.set)}))
        }
        Command::Inspect { manifest } => {
            let set = dataset::load_manifest(manifest)?;
            print_json(&summarize(&set))
        }
        Command::Filter { input, out, min_words } => {
            let set = dataset::load_manifest(input)?;
            let kept = dataset::filter_min_words(&set, *min_words);
            dataset::save_manifest(&kept, out)?;
            print_json(&json!({"run": run_echo, "input_pairs": set.len(), "kept_pairs": kept.len()}))
        }
        Command::Split {
            input,
            train,
            val,
            test,
            out,
        } => {
            let set = dataset::load_manifest(input)?;
            let (tr, va, te) = dataset::split(&set, *train, *val, *test, seed)?;
            for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
                dataset::save_manifest(part, &out.join(name))?;
            }
            print_json(&json!({"run": run_echo, "train": tr.len(), "val": va.len(), "test": te.len()}))
        }
        Command::Mix { sources, out } => {
            let parsed = sources.iter().map(|s| parse_source(s)).collect::<Result<Vec<_>>>()?;
            let sets = parsed
                .iter()
                .map(|(_, dir, _)| dataset::load_manifest(dir))
                .collect::<Result<Vec<_>>>()?;
            let spec = MixSpec {
                components: parsed
                    .iter()
                    .map(|(label, _, count)| MixComponent {
                        label: label.clone(),
                        count: *count,
                    })
                    .collect(),
                seed,
            };
            let labelled: Vec<(&str, &PairSet)> = parsed.iter().zip(&sets).map(|((l, _, _), s)| (l.as_str(), s)).collect();
            let mixed = dataset::mix(&spec, &labelled)?;
            dataset::save_manifest(&mixed, out)?;
            print_json(&json!({"run": run_echo, "pairs": mixed.len(), "per_dataset": mixed.dataset_histogram()}))
        }
        Command::Train {
            train,
            val,
            out,
            log,
            epochs,
            batch,
            lr,
            patience,
            no_early_stop,
            freeze_logit_scale,
            dim_out,
        } => {
            let cfg = TrainConfig {
                epochs: *epochs,
                batch_size: *batch,
                learning_rate: *lr,
                adam: AdamConfig::default(),
                early_stopping: !no_early_stop,
                patience: *patience,
                seed,
                freeze_logit_scale: *freeze_logit_scale,
                d_out: *dim_out,
            };
            cfg.validate()?;
            let train_set = dataset::load_manifest(train)?;
            let val_set = dataset::load_manifest(val)?;
            let (ckpt, train_log) = trainer::train(&train_set, &val_set, &cfg)?;
            trainer::save_checkpoint(&ckpt, out)?;
            let log_path = log.clone().unwrap_or_else(|| suffixed(out, ".log.json"));
            let doc = json!({"run": run_echo, "config": cfg, "log": train_log, "best_val_loss": ckpt.meta.best_val_loss});
            write_json(&log_path, &doc)?;
            print_json(&json!({
                "checkpoint": out,
                "log": log_path,
                "epochs_run": train_log.epochs_run(),
                "best_epoch": train_log.best_epoch,
                "best_val_loss": ckpt.meta.best_val_loss,
                "stop_reason": train_log.stop_reason,
            }))
        }
        Command::Eval {
            data,
            checkpoint,
            pop,
            trials,
            k,
            direction,
            out,
        } => {
            let set = dataset::load_manifest(data)?;
            let projector = load_projector(checkpoint.as_deref(), set.dim())?;
            let cfg = EvalConfig {
                population_sizes: pop.clone(),
                trials: *trials,
                ks: k.clone(),
                direction: *direction,
                seed,
            };
            let report = eval::run_trials(&set, &projector, &cfg)?;
            write_json(out, &json!({"run": run_echo, "config": cfg, "report": report}))?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Gap {
            data,
            checkpoint,
            pop,
            trials,
            out,
        } => {
            let set = dataset::load_manifest(data)?;
            let projector = load_projector(checkpoint.as_deref(), set.dim())?;
            let report = eval::similarity_gap(&set, &projector, *pop, *trials, seed)?;
            if let Some(out) = out {
                write_json(out, &json!({"run": run_echo, "report": report}))?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Dcg {
            descriptive,
            commentative,
            out,
        } => {
            let d = read_report(descriptive)?;
            let c = read_report(commentative)?;
            let report = eval::dcg_report(&d, &c)?;
            if let Some(out) = out {
                write_json(out, &json!({"run": run_echo, "report": report}))?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Query {
            data,
            checkpoint,
            record,
            query_data,
            k,
        } => {
            let images = dataset::load_manifest(data)?;
            let query_set = match query_data {
                Some(q) => dataset::load_manifest(q)?,
                None => images.clone(),
            };
            let pos = query_set
                .records()
                .iter()
                .position(|r| &r.id == record)
                .ok_or_else(|| Error::Argument(format!("record {record:?} not found")))?;
            let projector = load_projector(checkpoint.as_deref(), images.dim())?;
            let hits = eval::query_topk(query_set.text_vector(pos), &images, &projector, *k)?;
            print_json(&json!({"run": run_echo, "query": record, "hits": hits}))
        }
        Command::Viz {
            data,
            checkpoint,
            out,
            max_per_group,
        } => {
            let set = dataset::load_manifest(data)?;
            let groups = viz_groups(&set, checkpoint.as_deref(), *max_per_group)?;
            let export = viz::export_scatter(&groups, out)?;
            print_json(&json!({"run": run_echo, "rows": export.rows.len(), "groups": groups.iter().map(|g| &g.label).collect::<Vec<_>>()}))
        }
    }
}

fn validate_inputs(cmd: &Command) -> Result<()> {
    let mut inputs: Vec<&Path> = Vec::new();
    match cmd {
        Command::Synth { .. } | Command::Mix { .. } => {}
        Command::Inspect { manifest } => inputs.push(manifest),
        Command::Filter { input, .. } | Command::Split { input, .. } => inputs.push(input),
        Command::Train { train, val, .. } => inputs.extend([train.as_path(), val.as_path()]),
        Command::Eval { data, checkpoint, .. }
        | Command::Gap { data, checkpoint, .. }
        | Command::Viz { data, checkpoint, .. } => {
            inputs.push(data);
            inputs.extend(checkpoint.as_deref());
        }
        Command::Dcg {
            descriptive,
            commentative,
            ..
        } => inputs.extend([descriptive.as_path(), commentative.as_path()]),
        Command::Query {
            data,
            checkpoint,
            query_data,
            ..
        } => {
            inputs.push(data);
            inputs.extend(checkpoint.as_deref());
            inputs.extend(query_data.as_deref());
        }
    }
    for p in inputs {
        if !p.exists() {
            return Err(Error::Argument(format!("input path {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn parse_source(s: &str) -> Result<(String, PathBuf, usize)> {
    let bad = || Error::Argument(format!("--source must look like LABEL=DIR:COUNT, got {s:?}"));
    let (label, rest) = s.split_once('=').ok_or_else(bad)?;
    let (dir, count) = rest.rsplit_once(':').ok_or_else(bad)?;
    let count = count.parse().map_err(|_| bad())?;
    if label.is_empty() || dir.is_empty() {
        return Err(bad());
    }
    Ok((label.to_string(), PathBuf::from(dir), count))
}

fn load_projector(checkpoint: Option<&Path>, dim: usize) -> Result<DualProjector> {
    let projector = match checkpoint {
        Some(path) => trainer::load_checkpoint(path)?.projector,
        None => DualProjector::identity(dim),
    };
    if projector.d_in() != dim {
        return Err(Error::Shape {
            op: "load_projector",
            left: format!("checkpoint d_in {}", projector.d_in()),
            right: format!("data dim {dim}"),
        });
    }
    Ok(projector)
}

fn viz_groups(set: &PairSet, checkpoint: Option<&Path>, cap: Option<usize>) -> Result<Vec<ScatterGroup>> {
    let projector = match checkpoint {
        Some(_) => Some(load_projector(checkpoint, set.dim())?),
        None => None,
    };
    let cap = cap.unwrap_or(usize::MAX);
    let take = |pred: &dyn Fn(&dataset::PairRecord) -> bool| -> Vec<usize> {
        (0..set.len()).filter(|&i| pred(&set.records()[i])).take(cap).collect()
    };
    let ids = |idx: &[usize]| idx.iter().map(|&i| set.records()[i].id.clone()).collect::<Vec<_>>();
    let mut groups = Vec::new();
    for style in [Style::Descriptive, Style::Commentative, Style::Unknown] {
        let idx = take(&|r| r.style == style);
        if idx.is_empty() {
            continue;
        }
        let mut m = set.gather_texts(&idx);
        if let Some(p) = &projector {
            m = p.project_texts(&m)?;
        }
        groups.push(ScatterGroup::with_ids(format!("{style}-text"), m, ids(&idx))?);
    }
    let idx = take(&|_| true);
    let mut m = set.gather_images(&idx);
    if let Some(p) = &projector {
        m = p.project_images(&m)?;
    }
    groups.push(ScatterGroup::with_ids("image", m, ids(&idx))?);
    Ok(groups)
}

fn summarize(set: &PairSet) -> Value {
    json!({
        "pairs": set.len(),
        "dim": set.dim(),
        "image_rows": set.image_embeddings().rows(),
        "text_rows": set.text_embeddings().rows(),
        "per_dataset": set.dataset_histogram(),
        "per_style": set.style_histogram().into_iter().map(|(k, v)| (k.to_string(), v)).collect::<std::collections::BTreeMap<_, _>>(),
        "per_lang": set.lang_histogram().into_iter().map(|(k, v)| (serde_json::to_value(k).unwrap().as_str().unwrap().to_string(), v)).collect::<std::collections::BTreeMap<_, _>>(),
        "integrity_errors": 0,
    })
}

fn read_report(path: &Path) -> Result<RetrievalReport> {
    let doc: Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let body = doc.get("report").cloned().unwrap_or(doc);
    serde_json::from_value(body).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_json(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_spec_parsing() {
        assert_eq!(parse_source("tw=data/tw:100").unwrap(), ("tw".into(), PathBuf::from("data/tw"), 100));
        assert_eq!(parse_source("a=c:/x:y:5").unwrap().1, PathBuf::from("c:/x:y"));
        for bad in ["tw", "tw=dir", "=dir:3", "tw=dir:x"] {
            assert!(parse_source(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn train_defaults_mirror_table() {
        let cli = Cli::try_parse_from(["dcg-lab", "train", "--train", "a", "--val", "b", "--out", "c"]).unwrap();
        match cli.command {
            Command::Train { epochs, batch, lr, patience, no_early_stop, .. } => {
                assert_eq!((epochs, batch, lr, patience, no_early_stop), (50, 32, 5e-5, 3, false));
            }
            _ => unreachable!(),
        }
    }
}
