//! Raw files to training artifacts, and the on-disk layout shared by the
//! commands.
//!
//! A data directory holds:
//!
//! ```text
//! manifest.txt       key=value dataset summary, including the run settings
//! dataset.tsv        binarized and split interactions
//! graph.tsv          item graph edge list
//! graph_stats.json   degree histogram and isolated nodes
//! texts.tsv          item_id<TAB>text
//! config.txt         the configuration the directory was built with
//! filter_report.txt  items and users dropped by ingestion (ingest only)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{RunConfig, SemanticEncoder};
use crate::data::{binarize, split, InteractionDataset, RatingRecord, SplitConfig};
use crate::error::{Error, Result};
use crate::kg::{build_item_graph, graph_stats, ItemGraph, Triple};
use crate::matrix_io::LabeledMatrix;
use crate::model::ModelInputs;
use crate::semantic::read_item_texts;

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET: &str = "dataset.tsv";
pub const GRAPH: &str = "graph.tsv";
pub const GRAPH_STATS: &str = "graph_stats.json";
pub const TEXTS: &str = "texts.tsv";
pub const CONFIG: &str = "config.txt";
pub const FILTER_REPORT: &str = "filter_report.txt";

/// What ingestion removed and why.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterReport {
    pub rated_items: usize,
    pub without_text: Vec<String>,
    pub without_edge: Vec<String>,
    pub kept_items: usize,
    pub users_before: usize,
    pub users_after: usize,
}

impl FilterReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "rated_items={}\nkept_items={}\nwithout_text={}\nwithout_edge={}\nusers_before={}\nusers_after={}\n",
            self.rated_items,
            self.kept_items,
            self.without_text.len(),
            self.without_edge.len(),
            self.users_before,
            self.users_after
        );
        for id in &self.without_text {
            s.push_str(&format!("dropped\t{id}\tno_text\n"));
        }
        for id in &self.without_edge {
            s.push_str(&format!("dropped\t{id}\tno_edge\n"));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub graph: ItemGraph,
    pub texts: BTreeMap<String, String>,
}

/// Binarizes ratings, keeps the rated items that have a text and at least one
/// graph edge, drops users left under `min_records`, and splits.
pub fn ingest(
    records: &[RatingRecord],
    triples: &[Triple],
    texts: &BTreeMap<String, String>,
    config: &RunConfig,
) -> Result<(Prepared, FilterReport)> {
    let binary = binarize(records, config.min_records)?;
    let mut report = FilterReport {
        rated_items: binary.item_count(),
        users_before: binary.user_count(),
        ..FilterReport::default()
    };
    let (with_text, without_text): (Vec<String>, Vec<String>) = binary
        .items()
        .iter()
        .cloned()
        .partition(|i| texts.get(i).is_some_and(|t| !t.trim().is_empty()));
    report.without_text = without_text;
    let full = build_item_graph(triples, &with_text, config.shared_threshold);
    let graph = full.induced(|i| !full.neighbors(i).is_empty());
    let kept: BTreeSet<&str> = graph.items().iter().map(String::as_str).collect();
    report.without_edge = with_text
        .iter()
        .filter(|i| !kept.contains(i.as_str()))
        .cloned()
        .collect();
    report.kept_items = kept.len();
    if kept.is_empty() {
        return Err(Error::Usage(format!(
            "no item has both a text and a graph edge at shared_threshold={}",
            config.shared_threshold
        )));
    }
    let filtered = binary.retain_items(|i| kept.contains(i), config.min_records);
    report.users_after = filtered.user_count();
    let cfg = SplitConfig {
        train_fraction: config.train_fraction,
        validation_fraction: config.validation_fraction,
    };
    let dataset = split(&filtered, &cfg, config.seed);
    let texts = texts
        .iter()
        .filter(|(k, _)| kept.contains(k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    info!(
        "kept {} of {} rated items and {} of {} users",
        report.kept_items, report.rated_items, report.users_after, report.users_before
    );
    Ok((
        Prepared {
            dataset,
            graph,
            texts,
        },
        report,
    ))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn write_texts(path: &Path, texts: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (id, t) in texts {
        s.push_str(id);
        s.push('\t');
        s.push_str(&t.replace(['\t', '\n', '\r'], " "));
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for t in triples {
        write!(w, "{}\t{}\t{}", t.head, t.relation, t.tail).map_err(io)?;
        if t.text {
            write!(w, "\ttext").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_ratings(path: &Path, records: &[RatingRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.rating));
    }
    write_file(path, &s)
}

/// A directory of prepared artifacts.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(
        &self,
        prepared: &Prepared,
        config: &RunConfig,
        report: Option<&FilterReport>,
    ) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut manifest = prepared.dataset.manifest();
        manifest.extra.extend([
            (
                "graph_edges".to_string(),
                prepared.graph.edges().len().to_string(),
            ),
            (
                "shared_threshold".to_string(),
                config.shared_threshold.to_string(),
            ),
            ("min_records".to_string(), config.min_records.to_string()),
            ("seed".to_string(), config.seed.to_string()),
        ]);
        write_file(&self.path(MANIFEST), &manifest.to_text())?;
        prepared.dataset.write_tsv(&self.path(DATASET))?;
        prepared.graph.write_edge_list(&self.path(GRAPH))?;
        write_file(
            &self.path(GRAPH_STATS),
            &graph_stats(&prepared.graph).to_json(),
        )?;
        write_texts(&self.path(TEXTS), &prepared.texts)?;
        write_file(&self.path(CONFIG), &config.to_text())?;
        if let Some(r) = report {
            write_file(&self.path(FILTER_REPORT), &r.to_text())?;
        }
        Ok(())
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Usage(format!(
                "missing {}; build the directory with `mmrec ingest` or `mmrec synth` first",
                p.display()
            )))
        }
    }

    pub fn dataset(&self) -> Result<InteractionDataset> {
        InteractionDataset::read_tsv(&self.require(DATASET)?)
    }

    pub fn graph(&self) -> Result<ItemGraph> {
        ItemGraph::read_edge_list(&self.require(GRAPH)?)
    }

    pub fn texts(&self) -> Result<BTreeMap<String, String>> {
        read_item_texts(&self.require(TEXTS)?)
    }

    pub fn load(&self) -> Result<Prepared> {
        Ok(Prepared {
            dataset: self.dataset()?,
            graph: self.graph()?,
            texts: self.texts()?,
        })
    }
}

/// Model inputs for `graph`, reading sentences from `vectors` when the
/// configuration asks for precomputed vectors.
pub fn model_inputs(
    graph: &ItemGraph,
    texts: &BTreeMap<String, String>,
    vectors: Option<&Path>,
    config: &RunConfig,
) -> Result<ModelInputs> {
    match (config.semantic_encoder, vectors) {
        (SemanticEncoder::Precomputed, Some(path)) => {
            let m = LabeledMatrix::read(path)?;
            ModelInputs::from_vectors(graph, &m, config)
        }
        (SemanticEncoder::Precomputed, None) => Err(Error::Usage(
            "semantic_encoder=precomputed needs a sentence vector file".into(),
        )),
        (SemanticEncoder::HashedBow, v) => {
            if v.is_some() {
                warn!("sentence vectors ignored with semantic_encoder=hashed_bow");
            }
            ModelInputs::from_texts(graph, texts, config)
        }
    }
}
