use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, GraphError, KnowledgeGraph, Node, NodeId};

/// Maps logical triple fields onto CSV header names.
///
/// The defaults follow the public PrimeKG `kg.csv` header:
/// `relation,display_relation,x_index,x_id,x_type,x_name,x_source,y_index,...`.
/// Node ids come from the integer `*_index` columns. Source columns are
/// optional; when absent from the header the node source is left empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub x_id: String,
    pub x_name: String,
    pub x_type: String,
    pub x_source: String,
    pub y_id: String,
    pub y_name: String,
    pub y_type: String,
    pub y_source: String,
    pub relation: String,
    pub display_relation: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            x_id: "x_index".into(),
            x_name: "x_name".into(),
            x_type: "x_type".into(),
            x_source: "x_source".into(),
            y_id: "y_index".into(),
            y_name: "y_name".into(),
            y_type: "y_type".into(),
            y_source: "y_source".into(),
            relation: "relation".into(),
            display_relation: "display_relation".into(),
        }
    }
}

struct Positions {
    x: [Option<usize>; 4],
    y: [Option<usize>; 4],
    relation: usize,
    display: Option<usize>,
}

impl ColumnMap {
    fn resolve(&self, header: &csv::StringRecord) -> Result<Positions, GraphError> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| GraphError::MissingColumn(name.into()));
        Ok(Positions {
            x: [Some(need(&self.x_id)?), Some(need(&self.x_name)?), Some(need(&self.x_type)?), find(&self.x_source)],
            y: [Some(need(&self.y_id)?), Some(need(&self.y_name)?), Some(need(&self.y_type)?), find(&self.y_source)],
            relation: need(&self.relation)?,
            display: find(&self.display_relation),
        })
    }
}

fn parse_node(record: &csv::StringRecord, cols: &[Option<usize>; 4], line: u64) -> Result<Node, GraphError> {
    let field = |c: Option<usize>| c.and_then(|i| record.get(i)).unwrap_or("").trim();
    let raw_id = field(cols[0]);
    let id: NodeId = raw_id.parse().map_err(|_| GraphError::Malformed {
        line,
        message: format!("node id `{raw_id}` is not a non-negative integer"),
    })?;
    let name = field(cols[1]);
    if name.is_empty() {
        return Err(GraphError::Malformed { line, message: format!("node {id} has an empty name") });
    }
    Ok(Node { id, name: name.to_string(), category: field(cols[2]).to_string(), source: field(cols[3]).to_string() })
}

/// Reads a comma-separated triple file with a header row.
pub fn load_graph<R: Read>(reader: R, columns: &ColumnMap) -> Result<KnowledgeGraph, GraphError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return KnowledgeGraph::from_parts(Vec::new(), Vec::new()),
        Some(h) => h.map_err(csv_error)?,
    };
    let pos = columns.resolve(&header)?;

    let mut nodes: HashMap<NodeId, Node> = HashMap::new();
    let mut edges = Vec::new();
    for result in records {
        let record = result.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(GraphError::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let x = parse_node(&record, &pos.x, line)?;
        let y = parse_node(&record, &pos.y, line)?;
        let relation = record.get(pos.relation).unwrap_or("").trim().to_string();
        if relation.is_empty() {
            return Err(GraphError::Malformed { line, message: "empty relation".into() });
        }
        let display_relation = pos.display.and_then(|i| record.get(i)).unwrap_or("").trim().to_string();
        edges.push(Edge { src: x.id, dst: y.id, relation, display_relation });
        for n in [x, y] {
            match nodes.entry(n.id) {
                Entry::Vacant(v) => {
                    v.insert(n);
                }
                Entry::Occupied(o) => {
                    let prev = o.get();
                    if prev.name != n.name || prev.category != n.category {
                        return Err(GraphError::Malformed {
                            line,
                            message: format!(
                                "node {} redefined as `{}` ({}), previously `{}` ({})",
                                n.id, n.name, n.category, prev.name, prev.category
                            ),
                        });
                    }
                }
            }
        }
    }
    KnowledgeGraph::from_parts(nodes.into_values().collect(), edges)
}

pub fn load_graph_file(path: &Path, columns: &ColumnMap) -> Result<KnowledgeGraph, GraphError> {
    let file = File::open(path)
        .map_err(|e| GraphError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    load_graph(std::io::BufReader::new(file), columns)
}

fn csv_error(e: csv::Error) -> GraphError {
    match e.position() {
        Some(p) => GraphError::Malformed { line: p.line(), message: e.to_string() },
        None => GraphError::Csv(e),
    }
}

/// Writes one row per stored edge using the given column names.
pub fn write_csv<W: Write>(graph: &KnowledgeGraph, writer: W, columns: &ColumnMap) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        &columns.relation,
        &columns.display_relation,
        &columns.x_id,
        &columns.x_type,
        &columns.x_name,
        &columns.x_source,
        &columns.y_id,
        &columns.y_type,
        &columns.y_name,
        &columns.y_source,
    ])?;
    for e in graph.edges() {
        let x = graph.node(e.src).expect("edge endpoints exist");
        let y = graph.node(e.dst).expect("edge endpoints exist");
        w.write_record([
            e.relation.as_str(),
            &e.display_relation,
            &x.id.to_string(),
            &x.category,
            &x.name,
            &x.source,
            &y.id.to_string(),
            &y.category,
            &y.name,
            &y.source,
        ])?;
    }
    w.flush()?;
    Ok(())
}
