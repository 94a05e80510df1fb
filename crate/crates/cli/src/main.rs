use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mmrec::checkpoint::Checkpoint;
use mmrec::config::RunConfig;
use mmrec::data::{build_history_lenient, parse_ratings, RatingSchema, Split};
use mmrec::eval::{ablate, evaluate, Variant};
use mmrec::kg::{build_item_graph, graph_stats, parse_triples, TEXT_RELATION};
use mmrec::matrix_io::LabeledMatrix;
use mmrec::model::{predict_click, Model};
use mmrec::pipeline::{self, model_inputs, DataDir, Prepared};
use mmrec::semantic::{read_item_texts, SentenceSource};
use mmrec::synthetic::{generate_synthetic, SyntheticSpec};
use mmrec::train::train;

#[derive(Parser)]
#[command(
    name = "mmrec",
    version,
    about = "Multi-modal, multi-view recommendation"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    /// Repeat for more detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting values before the file, environment and --set layers.
    #[arg(long, value_enum, default_value = "full", global = true)]
    preset: Preset,

    /// Line-oriented key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match self.preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        };
        let overrides = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunConfig::layered(
            base,
            self.config.as_deref(),
            std::env::vars(),
            &overrides,
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Binarize ratings, build the item graph, filter and split.
    Ingest {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        /// item_id<TAB>text lines.
        #[arg(long)]
        texts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Field separator of the ratings file; `::` style files need `:`.
        #[arg(long, default_value = "\t")]
        delimiter: char,
        /// Ratings run from 0 to 10 instead of 0 to 5.
        #[arg(long)]
        ten_point: bool,
    },
    /// Build the item graph alone.
    BuildGraph {
        #[arg(long)]
        triples: PathBuf,
        /// One item id per line; defaults to every non-text triple head.
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Write a planted dataset as raw files plus a ready data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Defaults to 50, or the item count when that is smaller.
        #[arg(long)]
        ratings_per_user: Option<usize>,
    },
    /// Train a model on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the training log goes next to it with a `.log`
        /// suffix.
        #[arg(long)]
        out: PathBuf,
        /// Sentence vectors for semantic_encoder=precomputed.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Test-split metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare model variants over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated; the first is the baseline for deltas.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,semantic_only,structural_only,single_view,concat,average"
        )]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Plot-data CSV (`series,x,y`).
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Top-N items for one user.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Also rank items the user rated in the training split.
        #[arg(long)]
        include_seen: bool,
    },
    /// Self-attention weights of one user's views as TSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation-mode item representations (`.bin` for binary).
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!(
            "checkpoint {} not found; create one with `mmrec train`",
            path.display()
        );
    }
    Ok(Checkpoint::load(path)?)
}

fn user_of(prepared: &Prepared, model: &Model, user: &str) -> Result<mmrec::data::UserHistory> {
    let ds = prepared.dataset.reindex_items(model.items())?;
    let u = ds
        .user_index(user)
        .ok_or_else(|| anyhow!("unknown user id `{user}`"))?;
    Ok(build_history_lenient(
        &ds,
        u,
        model.config.history_size,
        model.config.seed,
    ))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            ratings,
            triples,
            texts,
            out,
            delimiter,
            ten_point,
        } => {
            let cfg = cli.config.resolve()?;
            let schema = if ten_point {
                RatingSchema::ten_point(delimiter)
            } else {
                RatingSchema {
                    delimiter,
                    ..RatingSchema::default()
                }
            };
            let parsed = parse_ratings(&ratings, &schema)?;
            let kg = parse_triples(&triples)?;
            let mut item_texts = read_item_texts(&texts)?;
            for t in kg
                .triples
                .iter()
                .filter(|t| t.text && t.relation == TEXT_RELATION)
            {
                item_texts
                    .entry(t.head.clone())
                    .or_insert_with(|| t.tail.clone());
            }
            let (prepared, report) =
                pipeline::ingest(&parsed.records, &kg.triples, &item_texts, &cfg)?;
            DataDir::new(&out).write(&prepared, &cfg, Some(&report))?;
            println!("{}", prepared.dataset.manifest().to_text().trim_end());
        }
        Command::BuildGraph {
            triples,
            items,
            out,
            stats,
        } => {
            let cfg = cli.config.resolve()?;
            let kg = parse_triples(&triples)?;
            let ids: Vec<String> = match items {
                Some(p) => fs::read_to_string(&p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                None => kg
                    .triples
                    .iter()
                    .filter(|t| !t.text)
                    .map(|t| t.head.clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
            let graph = build_item_graph(&kg.triples, &ids, cfg.shared_threshold);
            graph.write_edge_list(&out)?;
            let s = graph_stats(&graph);
            if let Some(p) = stats {
                write(&p, &s.to_json())?;
            }
            println!(
                "nodes={} edges={} isolated={}",
                s.nodes,
                s.edges,
                s.isolated.len()
            );
        }
        Command::Synth {
            out,
            users,
            items,
            noise,
            ratings_per_user,
        } => {
            let cfg = cli.config.resolve()?;
            let default = SyntheticSpec::default();
            let spec = SyntheticSpec {
                users,
                items,
                noise,
                ratings_per_user: ratings_per_user.unwrap_or(default.ratings_per_user.min(items)),
                seed: cfg.seed,
                threshold: cfg.shared_threshold,
                ..default
            };
            let data = generate_synthetic(&spec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            pipeline::write_ratings(&out.join("ratings.tsv"), &data.ratings)?;
            pipeline::write_triples(&out.join("triples.tsv"), &data.triples)?;
            let prepared = Prepared {
                dataset: data.dataset,
                graph: data.graph,
                texts: data.texts,
            };
            DataDir::new(&out).write(&prepared, &cfg, None)?;
            println!("{}", prepared.dataset.manifest().to_text().trim_end());
        }
        Command::Train { data, out, vectors } => {
            let cfg = cli.config.resolve()?;
            let prepared = DataDir::new(&data).load()?;
            let inputs = model_inputs(&prepared.graph, &prepared.texts, vectors.as_deref(), &cfg)?;
            let outcome = train(&prepared.dataset, inputs, &cfg)?;
            outcome.checkpoint().save(&out)?;
            let mut log = String::from("#epoch\tmean_loss\tvalidation_auc\tseconds\n");
            for l in &outcome.log {
                log.push_str(&l.line());
                log.push('\n');
            }
            let log_path = out.with_extension("log");
            write(&log_path, &log)?;
            println!(
                "best epoch {} of {}; checkpoint {}",
                outcome.best_epoch,
                outcome.log.len(),
                out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = DataDir::new(&data).dataset()?;
            let report = evaluate(&ck, &dataset)?;
            let body = serde_json::to_string_pretty(&serde_json::json!({
                "ndcg_gain": "binary",
                "split": "test",
                "checkpoint_epoch": ck.epoch,
                "config": ck.config,
                "metrics": report,
            }))?;
            match out {
                Some(p) => write(&p, &body)?,
                None => println!("{body}"),
            }
        }
        Command::Ablate {
            data,
            variants,
            seeds,
            out,
            plot,
            vectors,
        } => {
            let cfg = cli.config.resolve()?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v.trim()))
                .collect::<mmrec::Result<Vec<_>>>()?;
            let prepared = DataDir::new(&data).load()?;
            let inputs = model_inputs(&prepared.graph, &prepared.texts, vectors.as_deref(), &cfg)?;
            let sentences: SentenceSource = inputs.sentences;
            let report = ablate(
                &variants,
                &prepared.dataset,
                &prepared.graph,
                &sentences,
                &cfg,
                &seeds,
            )?;
            write(&out, &report.to_json())?;
            if let Some(p) = plot {
                write(&p, &report.plot_csv())?;
            }
            for v in &report.variants {
                println!(
                    "{}\tauc {:.4} ± {:.4}\tndcg@5 {:.4}\tndcg@10 {:.4}",
                    v.variant.as_str(),
                    v.report.auc.mean,
                    v.report.auc.std,
                    v.report.ndcg5.mean,
                    v.report.ndcg10.mean
                );
            }
        }
        Command::Predict {
            checkpoint,
            data,
            user,
            top,
            include_seen,
        } => {
            let model = Model::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let prepared = DataDir::new(&data).load()?;
            let h = user_of(&prepared, &model, &user)?;
            let seen: BTreeSet<usize> = if include_seen {
                BTreeSet::new()
            } else {
                let ds = prepared.dataset.reindex_items(model.items())?;
                ds.user_interactions(h.user)
                    .iter()
                    .filter(|x| x.split == Split::Train)
                    .map(|x| x.item)
                    .collect()
            };
            let items = model.item_matrix()?;
            let views = model.user_views(&items, &h)?;
            let w = model.score_weights();
            let mut scored = Vec::new();
            for i in (0..items.rows()).filter(|i| !seen.contains(i)) {
                scored.push((i, predict_click(&views, items.row_slice(i), w)?, false));
            }
            for (rank, (i, s, _)) in mmrec::eval::rank(scored).into_iter().take(top).enumerate() {
                println!("{}\t{}\t{s:.6}", rank + 1, model.items()[i]);
            }
        }
        Command::ExportAttention {
            checkpoint,
            data,
            user,
            out,
        } => {
            let model = Model::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            let prepared = DataDir::new(&data).load()?;
            let h = user_of(&prepared, &model, &user)?;
            let items = model.item_matrix()?;
            let mut s = String::from("#view\thead\tquery_item\tkey_item\tweight\n");
            for (view, head, beta) in model.attention_maps(&items, &h)? {
                let sample = match view {
                    mmrec::model::View::Prefer => &h.prefer,
                    mmrec::model::View::Dislike => &h.dislike,
                };
                for (a, &qi) in sample.iter().enumerate() {
                    for (b, &ki) in sample.iter().enumerate() {
                        s.push_str(&format!(
                            "{}\t{head}\t{}\t{}\t{}\n",
                            view.as_str(),
                            model.items()[qi],
                            model.items()[ki],
                            beta.get(a, b)
                        ));
                    }
                }
            }
            write(&out, &s)?;
        }
        Command::ExportEmbeddings { checkpoint, out } => {
            let model = Model::from_checkpoint(&load_checkpoint(&checkpoint)?)?;
            LabeledMatrix::new(model.items().to_vec(), model.item_matrix()?)?.write(&out)?;
            info!("wrote {} item vectors", model.items().len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
