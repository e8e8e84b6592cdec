use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GraphError, MultiViewSample, ViewGraph};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    y: f64,
    c: Option<f64>,
    views: BTreeMap<String, ViewRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    x: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    pos: Option<Vec<[f64; 3]>>,
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, GraphError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    parse_dataset(BufReader::new(file)).map_err(|e| match e {
        GraphError::Io { source, .. } => io_err(path, source),
        other => other,
    })
}

/// Parses JSONL, one sample per line; blank lines are skipped. Line numbers
/// in errors are 1-based file lines.
pub fn parse_dataset(reader: impl BufRead) -> Result<Dataset, GraphError> {
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| GraphError::Io {
            path: "<reader>".into(),
            source: e,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&text).map_err(|e| GraphError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut views = BTreeMap::new();
        for (name, v) in rec.views {
            let n = v.x.len();
            for &[s, d] in &v.edges {
                if s >= n || d >= n {
                    return Err(GraphError::EdgeOutOfRange {
                        line: line_no,
                        view: name,
                        src: s,
                        dst: d,
                        nodes: n,
                    });
                }
            }
            let g = ViewGraph::new(v.x, v.edges.iter().map(|e| (e[0], e[1])), v.pos);
            views.insert(name, g);
        }
        samples.push(MultiViewSample {
            id: rec.id,
            views,
            y: rec.y,
            planted_c: rec.c,
            planted_noise: None,
            motif: None,
        });
        lines.push(line_no);
    }
    if samples.is_empty() {
        return Err(GraphError::TooSmall(0));
    }
    // Validate against the first sample's layout, reporting file line numbers.
    let probe = Dataset::new(vec![samples[0].clone()]).map_err(|e| relabel(e, lines[0]))?;
    for (s, &line) in samples.iter().zip(&lines) {
        probe.validate_sample(s, line)?;
    }
    Ok(Dataset {
        samples,
        view_ids: probe.view_ids,
        feature_dim: probe.feature_dim,
        geometric: probe.geometric,
    })
}

fn relabel(e: GraphError, line: usize) -> GraphError {
    match e {
        GraphError::FeatureDim {
            view, found, expected, ..
        } => GraphError::FeatureDim {
            line,
            view,
            found,
            expected,
        },
        GraphError::EmptyGraph { view, .. } => GraphError::EmptyGraph { line, view },
        GraphError::Positions { view, message, .. } => GraphError::Positions { line, view, message },
        other => other,
    }
}

pub fn write_dataset(mut w: impl Write, ds: &Dataset) -> std::io::Result<()> {
    for s in &ds.samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            y: s.y,
            c: s.planted_c,
            views: s
                .views
                .iter()
                .map(|(k, g)| {
                    (
                        k.clone(),
                        ViewRecord {
                            x: g.features.clone(),
                            edges: g.undirected_edges().into_iter().map(|(a, b)| [a, b]).collect(),
                            pos: g.positions.clone(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), GraphError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, ds).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}
