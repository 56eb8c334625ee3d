//! CSV node/event files plus a JSON period sidecar.
//!
//! ```text
//! nodes.csv    id,class,period,f0,...,f{F-1}
//! events.csv   src,dst,t
//! periods.json [{"index":1,"t_start":0.0,"t_end":100.0,"classes":[0,1,2]}, ...]
//! ```

use std::fs::File;
use std::path::{Path, PathBuf};

use super::{ClassId, Event, NodeId, NodeRecord, PeriodSpec, TemporalGraph};
use crate::error::{Error, Result};

pub const NODE_FILE: &str = "nodes.csv";
pub const EVENT_FILE: &str = "events.csv";
pub const PERIOD_FILE: &str = "periods.json";

pub fn save_graph(graph: &TemporalGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join(NODE_FILE))?;
    let mut header = vec!["id".to_string(), "class".into(), "period".into()];
    header.extend((0..graph.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for n in graph.nodes() {
        let mut row = vec![n.id.to_string(), n.class.to_string(), n.birth_period.to_string()];
        row.extend(n.feature.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(EVENT_FILE))?;
    w.write_record(["src", "dst", "t"])?;
    for e in graph.events() {
        w.write_record([e.src.to_string(), e.dst.to_string(), e.t.to_string()])?;
    }
    w.flush()?;

    let f = File::create(dir.join(PERIOD_FILE))?;
    serde_json::to_writer_pretty(f, graph.periods())?;
    Ok(())
}

/// Loads a graph; the period table is read from `periods.json` next to the
/// node file.
pub fn load_graph(node_file: &Path, event_file: &Path) -> Result<TemporalGraph> {
    let sidecar = node_file.with_file_name(PERIOD_FILE);
    load_graph_with_periods(node_file, event_file, &sidecar)
}

pub fn load_graph_with_periods(node_file: &Path, event_file: &Path, period_file: &Path) -> Result<TemporalGraph> {
    let periods: Vec<PeriodSpec> = serde_json::from_reader(File::open(period_file)?)?;
    let nodes = read_nodes(node_file)?;
    let events = read_events(event_file)?;

    // Re-check the per-line invariants here so errors carry a line number.
    let known: std::collections::HashSet<NodeId> = nodes.iter().map(|(_, n)| n.id).collect();
    let last = periods.len();
    for (line, e) in &events {
        for end in [e.src, e.dst] {
            if !known.contains(&end) {
                return Err(parse_err(event_file, *line, format!("event references unknown node {end}")));
            }
        }
        let inside = periods.iter().any(|p| e.t >= p.t_start && (e.t < p.t_end || (p.index == last && e.t == p.t_end)));
        if !inside {
            return Err(parse_err(event_file, *line, format!("timestamp {} lies outside all periods", e.t)));
        }
    }

    TemporalGraph::new(
        nodes.into_iter().map(|(_, n)| n).collect(),
        events.into_iter().map(|(_, e)| e).collect(),
        periods,
    )
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: PathBuf::from(path), line, msg: msg.into() }
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| parse_err(path, line, format!("missing column {name}")))?;
    raw.trim().parse().map_err(|_| parse_err(path, line, format!("cannot parse {name} from {raw:?}")))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(File::open(path)?))
}

fn read_nodes(path: &Path) -> Result<Vec<(u64, NodeRecord)>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[..3] != ["id", "class", "period"] {
        return Err(parse_err(path, 1, "header must start with id,class,period"));
    }
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(parse_err(path, 1, format!("expected feature column f{i}, found {c:?}")));
        }
    }
    let dim = cols.len() - 3;

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 3 {
            return Err(parse_err(
                path,
                line,
                format!("dimension mismatch: expected {} features, found {}", dim, rec.len().saturating_sub(3)),
            ));
        }
        let id: u32 = field(path, line, &rec, 0, "id")?;
        let class: u32 = field(path, line, &rec, 1, "class")?;
        let birth_period: usize = field(path, line, &rec, 2, "period")?;
        let feature = (0..dim).map(|k| field::<f64>(path, line, &rec, 3 + k, "feature")).collect::<Result<Vec<_>>>()?;
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, line, "non-finite feature"));
        }
        out.push((line, NodeRecord { id: NodeId(id), class: ClassId(class), birth_period, feature }));
    }
    Ok(out)
}

fn read_events(path: &Path) -> Result<Vec<(u64, Event)>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != ["src", "dst", "t"] {
        return Err(parse_err(path, 1, "header must be src,dst,t"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let src: u32 = field(path, line, &rec, 0, "src")?;
        let dst: u32 = field(path, line, &rec, 1, "dst")?;
        let t: f64 = field(path, line, &rec, 2, "t")?;
        if !t.is_finite() {
            return Err(parse_err(path, line, "non-finite timestamp"));
        }
        if src == dst {
            return Err(parse_err(path, line, "self-loop event"));
        }
        out.push((line, Event { src: NodeId(src), dst: NodeId(dst), t }));
    }
    Ok(out)
}
