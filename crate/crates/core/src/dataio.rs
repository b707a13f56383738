//! Dataset manifests, file ingestion, temporal edges and a synthetic
//! planted-fraud generator.
//!
//! Formats: features are a headerless CSV of reals (row `i` is node `i`),
//! labels a CSV with header `node_id,label` (`1` fraud, `0` normal, `-1`
//! unlabeled), edges a TSV of `src<TAB>dst` pairs, and the manifest a JSON
//! document. Paths inside a manifest are relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relgraph::{Label, Relation, RelationalGraph};

fn default_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_file: Option<PathBuf>,
    #[serde(default)]
    pub directed: bool,
    /// Edges are built from the transaction table instead of an edge file.
    #[serde(default)]
    pub temporal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub feature_file: PathBuf,
    pub label_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transaction_file: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub temporal_k: usize,
    pub relations: Vec<RelationEntry>,
}

impl DatasetManifest {
    /// Reads a manifest and resolves its file paths against the manifest's
    /// directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        manifest.resolve(base);
        Ok(manifest)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.feature_file);
        join(&mut self.label_file);
        if let Some(t) = self.transaction_file.as_mut() {
            join(t);
        }
        for r in &mut self.relations {
            if let Some(e) = r.edge_file.as_mut() {
                join(e);
            }
        }
    }

    pub fn validate(&self, require_descriptions: bool) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::Manifest("no relations listed".into()));
        }
        let mut names = HashSet::new();
        for r in &self.relations {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate relation name `{}`", r.name)));
            }
            if require_descriptions && r.description.trim().is_empty() {
                return Err(Error::Manifest(format!("relation `{}` has no description", r.name)));
            }
            if r.temporal {
                if r.group_key.is_none() {
                    return Err(Error::Manifest(format!(
                        "temporal relation `{}` needs a group_key",
                        r.name
                    )));
                }
                if self.transaction_file.is_none() {
                    return Err(Error::Manifest(format!(
                        "temporal relation `{}` needs a transaction_file",
                        r.name
                    )));
                }
            } else if r.edge_file.is_none() {
                return Err(Error::Manifest(format!("relation `{}` has no edge_file", r.name)));
            }
        }
        if self.temporal_k == 0 {
            return Err(Error::Manifest("temporal_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Standard file layout for `graph`, as written by [`write_dataset`].
    pub fn for_graph(name: &str, graph: &RelationalGraph) -> Self {
        Self {
            name: name.to_string(),
            feature_file: "features.csv".into(),
            label_file: "labels.csv".into(),
            transaction_file: None,
            temporal_k: default_k(),
            relations: graph
                .relations()
                .iter()
                .map(|r| RelationEntry {
                    name: r.name.clone(),
                    description: r.description.clone(),
                    edge_file: Some(format!("edges_{}.tsv", r.id).into()),
                    directed: r.directed,
                    temporal: false,
                    group_key: None,
                })
                .collect(),
        }
    }
}

/// Per-node transaction records with one group value per grouping key.
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionTable {
    keys: Vec<String>,
    rows: Vec<TransactionRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransactionRow {
    pub node_id: usize,
    pub timestamp: f64,
    /// Aligned with the table's keys.
    pub groups: Vec<String>,
}

impl TransactionTable {
    pub fn new(keys: Vec<String>, rows: Vec<TransactionRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.node_id) {
                return Err(Error::DuplicateNode(row.node_id));
            }
            if row.groups.len() != keys.len() {
                return Err(Error::Manifest(format!(
                    "transaction for node {} has {} group values, expected {}",
                    row.node_id,
                    row.groups.len(),
                    keys.len()
                )));
            }
            if row.timestamp.is_nan() {
                return Err(Error::Manifest(format!(
                    "transaction for node {} has a NaN timestamp",
                    row.node_id
                )));
            }
        }
        Ok(Self { keys, rows })
    }

    /// CSV with header `node_id,timestamp,<key>...`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.len() < 2 || &headers[0] != "node_id" || &headers[1] != "timestamp" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must start with node_id,timestamp".into(),
            });
        }
        let keys: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let line = record_line(&record);
            let node_id = parse_field::<usize>(path, line, record.get(0), "node_id")?;
            let timestamp = parse_field::<f64>(path, line, record.get(1), "timestamp")?;
            let groups = record.iter().skip(2).map(str::to_string).collect();
            rows.push(TransactionRow {
                node_id,
                timestamp,
                groups,
            });
        }
        Self::new(keys, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("node_id,timestamp");
        for k in &self.keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.node_id, row.timestamp));
            for g in &row.groups {
                out.push(',');
                out.push_str(g);
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn rows(&self) -> &[TransactionRow] {
        &self.rows
    }
}

/// Links each transaction to the next `k` transactions of its group in
/// chronological order. Timestamp ties are broken by node id.
pub fn build_temporal_edges(table: &TransactionTable, group_key: &str, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::Config("temporal window k must be at least 1".into()));
    }
    let col = table
        .keys
        .iter()
        .position(|key| key == group_key)
        .ok_or_else(|| Error::Manifest(format!("unknown group key `{group_key}`")))?;
    let mut groups: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    for row in &table.rows {
        groups
            .entry(row.groups[col].as_str())
            .or_default()
            .push((row.timestamp, row.node_id));
    }
    let mut edges = Vec::new();
    for members in groups.values_mut() {
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for i in 0..members.len() {
            for j in i + 1..members.len().min(i + k + 1) {
                edges.push((members[i].1, members[j].1));
            }
        }
    }
    Ok(edges)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: Option<&str>, what: &str) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("missing {what}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse {what} from `{raw}`"),
    })
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("row has {} values, expected {w}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            data.push(parse_field::<f64>(path, line, Some(field), "feature")?);
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Array2::from_shape_vec((rows, width), data).map_err(|e| Error::shape("read_features", e.to_string()))
}

/// Labels indexed by node id; every id in `0..n` must appear exactly once.
pub fn read_labels(path: &Path, n: usize) -> Result<Vec<Label>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "node_id" || &headers[1] != "label" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must be node_id,label".into(),
        });
    }
    let mut labels: Vec<Option<Label>> = vec![None; n];
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        let node = parse_field::<usize>(path, line, record.get(0), "node_id")?;
        let code = parse_field::<i64>(path, line, record.get(1), "label")?;
        let label = Label::from_code(code).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("label must be 1, 0 or -1, got {code}"),
        })?;
        let slot = labels.get_mut(node).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("node id {node} is outside 0..{n}"),
        })?;
        if slot.replace(label).is_some() {
            return Err(Error::DuplicateNode(node));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("no label row for node {i}"),
            })
        })
        .collect()
}

pub fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record_line(&record);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected `src<TAB>dst`, found {} fields", record.len()),
            });
        }
        let src = parse_field::<usize>(path, line, record.get(0), "src")?;
        let dst = parse_field::<usize>(path, line, record.get(1), "dst")?;
        edges.push((src, dst));
    }
    Ok(edges)
}

/// Builds the graph described by `manifest`. Temporal relations are derived
/// from the transaction table and are always directed.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<RelationalGraph> {
    manifest.validate(false)?;
    let features = read_features(&manifest.feature_file)?;
    let labels = read_labels(&manifest.label_file, features.nrows())?;
    let table = match &manifest.transaction_file {
        Some(path) if manifest.relations.iter().any(|r| r.temporal) => Some(TransactionTable::read_csv(path)?),
        _ => None,
    };
    let mut relations = Vec::with_capacity(manifest.relations.len());
    let mut edges = Vec::with_capacity(manifest.relations.len());
    for (id, entry) in manifest.relations.iter().enumerate() {
        let list = if entry.temporal {
            let table = table.as_ref().expect("validated above");
            let key = entry.group_key.as_deref().expect("validated above");
            build_temporal_edges(table, key, manifest.temporal_k)?
        } else {
            read_edges(entry.edge_file.as_ref().expect("validated above"))?
        };
        relations.push(Relation {
            id,
            name: entry.name.clone(),
            description: entry.description.clone(),
            directed: entry.directed || entry.temporal,
        });
        edges.push(list);
    }
    RelationalGraph::new(features, labels, relations, edges)
}

pub fn load_manifest_dataset(path: &Path) -> Result<(DatasetManifest, RelationalGraph)> {
    let manifest = DatasetManifest::from_path(path)?;
    let graph = load_dataset(&manifest)?;
    Ok((manifest, graph))
}

/// Writes `graph` into `dir` using the standard layout and returns the path
/// of the written manifest.
pub fn write_dataset(graph: &RelationalGraph, name: &str, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest::for_graph(name, graph);
    let write = |rel: &Path, body: String| {
        let p = dir.join(rel);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };

    let mut feats = String::new();
    for row in graph.features().outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    write(&manifest.feature_file, feats)?;

    let mut labels = String::from("node_id,label\n");
    for (i, l) in graph.labels().iter().enumerate() {
        labels.push_str(&format!("{i},{}\n", l.code()));
    }
    write(&manifest.label_file, labels)?;

    for (entry, rel) in manifest.relations.iter().zip(graph.relations()) {
        let mut body = String::new();
        for (s, d) in graph.edges(rel.id) {
            body.push_str(&format!("{s}\t{d}\n"));
        }
        write(entry.edge_file.as_ref().expect("set by for_graph"), body)?;
    }

    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parameters of the planted-fraud generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub node_count: usize,
    pub feature_dim: usize,
    pub fraud_rate: f64,
    /// One entry per relation, each in `[0, 1]`.
    pub signal: Vec<f64>,
    /// Expected number of same-class neighbors at signal 1.
    #[serde(default = "default_avg_degree")]
    pub avg_degree: f64,
    /// Probability of an edge between any pair, independent of class.
    #[serde(default = "default_noise_prob")]
    pub noise_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_avg_degree() -> f64 {
    12.0
}

fn default_noise_prob() -> f64 {
    0.01
}

impl SynthSpec {
    pub fn relation_count(&self) -> usize {
        self.signal.len()
    }

    pub fn fraud_count(&self) -> usize {
        (self.fraud_rate * self.node_count as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraud_rate > 0.0 && self.fraud_rate < 1.0) {
            return Err(Error::SynthSpec(format!(
                "fraud_rate {} is outside (0, 1)",
                self.fraud_rate
            )));
        }
        if self.signal.is_empty() {
            return Err(Error::SynthSpec("at least one relation is required".into()));
        }
        if let Some(s) = self.signal.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::SynthSpec(format!("signal {s} is outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::SynthSpec(format!(
                "noise_prob {} is outside [0, 1]",
                self.noise_prob
            )));
        }
        if !(self.avg_degree >= 0.0 && self.avg_degree.is_finite()) {
            return Err(Error::SynthSpec("avg_degree must be finite and non-negative".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::SynthSpec("feature_dim must be positive".into()));
        }
        let fraud = self.fraud_count();
        if fraud == 0 || fraud >= self.node_count {
            return Err(Error::SynthSpec(format!(
                "fraud_rate {} over {} nodes gives {fraud} fraud nodes",
                self.fraud_rate, self.node_count
            )));
        }
        Ok(())
    }
}

pub fn synth_description(j: usize) -> String {
    format!(
        "Relation {} connects two accounts that share the same type {} attribute .",
        j + 1,
        j + 1
    )
}

/// Planted-fraud graph. Labels come first; relation `j` links each
/// same-class pair with probability `signal[j] * avg_degree / (n_c - 1)`,
/// where `n_c` is the size of the pair's class, and any pair with
/// probability `noise_prob`. Features are iid standard normal and carry no
/// label information.
pub fn synth_fraud_graph(spec: &SynthSpec) -> Result<(RelationalGraph, DatasetManifest)> {
    spec.validate()?;
    let n = spec.node_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![Label::Normal; n];
    for &v in &order[..spec.fraud_count()] {
        labels[v] = Label::Fraud;
    }
    let class_size = |l: Label| labels.iter().filter(|&&x| x == l).count();
    let sizes = [class_size(Label::Normal), class_size(Label::Fraud)];

    let features = Array2::from_shape_fn((n, spec.feature_dim), |_| rng.sample::<f64, _>(StandardNormal));

    let mut relations = Vec::with_capacity(spec.relation_count());
    let mut edges = Vec::with_capacity(spec.relation_count());
    for (j, &s) in spec.signal.iter().enumerate() {
        let p_same = [0, 1].map(|c| {
            let denom = (sizes[c] as f64 - 1.0).max(1.0);
            (s * spec.avg_degree / denom).min(1.0)
        });
        let mut list = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let same = labels[u] == labels[v];
                let planted = same && rng.random::<f64>() < p_same[(labels[u] == Label::Fraud) as usize];
                let noise = rng.random::<f64>() < spec.noise_prob;
                if planted || noise {
                    list.push((u, v));
                }
            }
        }
        relations.push(Relation {
            id: j,
            name: format!("R{}", j + 1),
            description: synth_description(j),
            directed: false,
        });
        edges.push(list);
    }
    let graph = RelationalGraph::new(features, labels, relations, edges)?;
    let manifest = DatasetManifest::for_graph("synthetic", &graph);
    Ok((graph, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(usize, f64, &str)]) -> TransactionTable {
        TransactionTable::new(
            vec!["g".into()],
            rows.iter()
                .map(|&(node_id, timestamp, g)| TransactionRow {
                    node_id,
                    timestamp,
                    groups: vec![g.into()],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn four_ordered_rows_k3() {
        let t = table(&[(1, 1.0, "a"), (2, 2.0, "a"), (3, 3.0, "a"), (4, 4.0, "a")]);
        let mut e = build_temporal_edges(&t, "g", 3).unwrap();
        e.sort();
        assert_eq!(e, vec![(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]);
    }

    #[test]
    fn clipping_and_singletons() {
        let t = table(&[(7, 5.0, "a"), (3, 1.0, "a"), (9, 0.0, "b")]);
        assert_eq!(build_temporal_edges(&t, "g", 3).unwrap(), vec![(3, 7)]);
    }

    #[test]
    fn ties_break_by_node_id() {
        let t = table(&[(5, 1.0, "a"), (2, 1.0, "a")]);
        assert_eq!(build_temporal_edges(&t, "g", 1).unwrap(), vec![(2, 5)]);
    }

    #[test]
    fn k_zero_and_unknown_key_fail() {
        let t = table(&[(0, 1.0, "a")]);
        assert!(build_temporal_edges(&t, "g", 0).is_err());
        assert!(build_temporal_edges(&t, "h", 1).is_err());
    }

    #[test]
    fn duplicate_transaction_node_rejected() {
        let rows = vec![
            TransactionRow {
                node_id: 1,
                timestamp: 0.0,
                groups: vec![],
            };
            2
        ];
        assert!(matches!(
            TransactionTable::new(vec![], rows),
            Err(Error::DuplicateNode(1))
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            node_count: 60,
            feature_dim: 4,
            fraud_rate: 0.2,
            signal: vec![0.9, 0.0],
            avg_degree: 6.0,
            noise_prob: 0.02,
            seed: 11,
        };
        let (a, ma) = synth_fraud_graph(&spec).unwrap();
        let (b, mb) = synth_fraud_graph(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.labels().iter().filter(|l| **l == Label::Fraud).count(), 12);
    }

    #[test]
    fn degenerate_synth_spec() {
        let spec = SynthSpec {
            node_count: 10,
            feature_dim: 2,
            fraud_rate: 0.01,
            signal: vec![1.0],
            avg_degree: 2.0,
            noise_prob: 0.0,
            seed: 0,
        };
        assert!(matches!(synth_fraud_graph(&spec), Err(Error::SynthSpec(_))));
    }
}
