//! Schema definitions, the table-level schema graph, the entity/bridge/hub
//! taxonomy, and atomic-route compilation.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Optional size hint for categorical columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignKeySpec {
    pub column: String,
    #[serde(rename = "target")]
    pub target_table: String,
    #[serde(default)]
    pub nullable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableDef {
    pub name: String,
    pub primary_key: String,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKeySpec>,
    /// Attribute columns. When `time_column` is set it names one of these,
    /// which must have kind `timestamp`.
    #[serde(default)]
    pub attributes: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_column: Option<String>,
}

impl TableDef {
    /// Attributes that feed node features: everything except the time column.
    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.attributes
            .iter()
            .filter(move |c| self.time_column.as_deref() != Some(c.name.as_str()))
    }

    pub fn class(&self) -> TableClass {
        TableClass::from_fk_count(self.foreign_keys.len())
    }
}

/// A validated relational schema. Declaration order of tables and of each
/// table's foreign keys is preserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDef {
    pub tables: Vec<TableDef>,
}

impl SchemaDef {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn fk_count(&self) -> usize {
        self.tables.iter().map(|t| t.foreign_keys.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Hex SHA-256 over the compact JSON form; used to pair checkpoints
    /// with the schema they were trained on.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate table `{}`", t.name)));
            }
        }
        for t in &self.tables {
            let mut cols = HashSet::new();
            let all = std::iter::once(t.primary_key.as_str())
                .chain(t.foreign_keys.iter().map(|f| f.column.as_str()))
                .chain(t.attributes.iter().map(|c| c.name.as_str()));
            for c in all {
                if !cols.insert(c) {
                    return Err(Error::InvalidSchema(format!(
                        "duplicate column `{c}` in table `{}`",
                        t.name
                    )));
                }
            }
            for fk in &t.foreign_keys {
                if !names.contains(fk.target_table.as_str()) {
                    return Err(Error::InvalidSchema(format!(
                        "foreign key `{}.{}` targets undeclared table `{}`",
                        t.name, fk.column, fk.target_table
                    )));
                }
            }
            for c in &t.attributes {
                if c.cardinality == Some(0) {
                    return Err(Error::InvalidSchema(format!(
                        "cardinality of `{}.{}` must be at least 1",
                        t.name, c.name
                    )));
                }
            }
            if let Some(tc) = &t.time_column {
                match t.attributes.iter().find(|c| &c.name == tc) {
                    Some(c) if c.kind == ColumnKind::Timestamp => {}
                    _ => {
                        return Err(Error::InvalidSchema(format!(
                            "time column `{}.{tc}` is not declared as a timestamp attribute",
                            t.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a schema JSON document.
pub fn parse_schema(text: &str) -> Result<SchemaDef> {
    let schema: SchemaDef = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => Error::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
            Category::Data => Error::InvalidSchema(e.to_string()),
        }
    })?;
    schema.validate()?;
    Ok(schema)
}

/// Taxonomy of node-types by foreign-key count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableClass {
    /// Zero or one foreign key.
    Entity,
    /// Exactly two foreign keys.
    Bridge,
    /// Three or more foreign keys.
    Hub,
}

impl TableClass {
    pub fn from_fk_count(n: usize) -> Self {
        match n {
            0 | 1 => TableClass::Entity,
            2 => TableClass::Bridge,
            _ => TableClass::Hub,
        }
    }
}

pub fn classify_tables(schema: &SchemaDef) -> Vec<(String, TableClass)> {
    schema
        .tables
        .iter()
        .map(|t| (t.name.clone(), t.class()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemaEdge {
    /// Index of the table holding the foreign key.
    pub from: usize,
    /// Index of the referenced table.
    pub to: usize,
    pub column: String,
}

/// Table-level topology: one node per table, one FK -> PK edge per foreign key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemaGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<SchemaEdge>,
}

impl SchemaGraph {
    /// Combinatorial Laplacian `D - A` of the undirected multigraph behind
    /// the schema. Self-loops cancel and contribute nothing.
    pub fn laplacian(&self) -> Tensor {
        let n = self.nodes.len();
        let mut l = Tensor::zeros(n, n);
        for e in &self.edges {
            if e.from == e.to {
                continue;
            }
            l.set(e.from, e.to, l.get(e.from, e.to) - 1.0);
            l.set(e.to, e.from, l.get(e.to, e.from) - 1.0);
            l.set(e.from, e.from, l.get(e.from, e.from) + 1.0);
            l.set(e.to, e.to, l.get(e.to, e.to) + 1.0);
        }
        l
    }
}

pub fn build_schema_graph(schema: &SchemaDef) -> SchemaGraph {
    let index = |name: &str| schema.table_index(name).expect("validated schema");
    let edges = schema
        .tables
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            t.foreign_keys.iter().map(move |fk| SchemaEdge {
                from: i,
                to: index(&fk.target_table),
                column: fk.column.clone(),
            })
        })
        .collect();
    SchemaGraph {
        nodes: schema.tables.iter().map(|t| t.name.clone()).collect(),
        edges,
    }
}

/// Which end of a single-FK link holds the foreign key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkDirection {
    /// Messages flow from the FK table to the table it references.
    FkToPk,
    /// Messages flow from the referenced table back to the FK table.
    PkToFk,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RouteKind {
    Direct {
        src: String,
        dst: String,
        fk_table: String,
        fk_column: String,
        direction: LinkDirection,
    },
    Composite {
        src: String,
        mid: String,
        dst: String,
        fk_src_column: String,
        fk_dst_column: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicRoute {
    pub route_id: usize,
    #[serde(flatten)]
    pub kind: RouteKind,
}

impl AtomicRoute {
    pub fn src(&self) -> &str {
        match &self.kind {
            RouteKind::Direct { src, .. } | RouteKind::Composite { src, .. } => src,
        }
    }

    pub fn dst(&self) -> &str {
        match &self.kind {
            RouteKind::Direct { dst, .. } | RouteKind::Composite { dst, .. } => dst,
        }
    }

    pub fn mid(&self) -> Option<&str> {
        match &self.kind {
            RouteKind::Direct { .. } => None,
            RouteKind::Composite { mid, .. } => Some(mid),
        }
    }

    pub fn is_composite(&self) -> bool {
        matches!(self.kind, RouteKind::Composite { .. })
    }
}

impl fmt::Display for AtomicRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RouteKind::Direct { src, dst, .. } => write!(f, "({src}→{dst})"),
            RouteKind::Composite { src, mid, dst, .. } => write!(f, "({src}→{mid}→{dst})"),
        }
    }
}

/// Compiles the schema into its atomic routes.
///
/// A table with one foreign key yields the direct route in both directions.
/// A table with `k >= 2` foreign keys yields one composite route per ordered
/// pair of distinct FK columns. Routes are sorted by (FK-holding table,
/// column names, direction) and numbered in that order.
pub fn derive_atomic_routes(schema: &SchemaDef) -> Vec<AtomicRoute> {
    let mut keyed: Vec<((String, String, String, u8), RouteKind)> = Vec::new();
    for t in &schema.tables {
        match t.foreign_keys.as_slice() {
            [] => {}
            [fk] => {
                for (order, direction) in [(0u8, LinkDirection::FkToPk), (1, LinkDirection::PkToFk)] {
                    let (src, dst) = match direction {
                        LinkDirection::FkToPk => (t.name.clone(), fk.target_table.clone()),
                        LinkDirection::PkToFk => (fk.target_table.clone(), t.name.clone()),
                    };
                    keyed.push((
                        (t.name.clone(), fk.column.clone(), String::new(), order),
                        RouteKind::Direct {
                            src,
                            dst,
                            fk_table: t.name.clone(),
                            fk_column: fk.column.clone(),
                            direction,
                        },
                    ));
                }
            }
            fks => {
                for a in fks {
                    for b in fks {
                        if a.column == b.column {
                            continue;
                        }
                        keyed.push((
                            (t.name.clone(), a.column.clone(), b.column.clone(), 0),
                            RouteKind::Composite {
                                src: a.target_table.clone(),
                                mid: t.name.clone(),
                                dst: b.target_table.clone(),
                                fk_src_column: a.column.clone(),
                                fk_dst_column: b.column.clone(),
                            },
                        ));
                    }
                }
            }
        }
    }
    keyed.sort_by(|x, y| x.0.cmp(&y.0));
    keyed
        .into_iter()
        .enumerate()
        .map(|(route_id, (_, kind))| AtomicRoute { route_id, kind })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteFormat {
    Json,
    Dot,
}

impl FromStr for RouteFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(RouteFormat::Json),
            "dot" => Ok(RouteFormat::Dot),
            other => Err(Error::InvalidArgument(format!(
                "unsupported route format `{other}` (expected json or dot)"
            ))),
        }
    }
}

pub fn emit_routes(routes: &[AtomicRoute], format: RouteFormat) -> String {
    match format {
        RouteFormat::Json => {
            let mut s = serde_json::to_string_pretty(routes).expect("routes serialize");
            s.push('\n');
            s
        }
        RouteFormat::Dot => emit_dot(routes),
    }
}

fn emit_dot(routes: &[AtomicRoute]) -> String {
    let mut out = String::from("digraph atomic_routes {\n    rankdir=LR;\n");
    let mut seen = HashSet::new();
    for r in routes {
        for name in [Some(r.src()), r.mid(), Some(r.dst())].into_iter().flatten() {
            if seen.insert(name.to_string()) {
                let _ = writeln!(out, "    \"{name}\";");
            }
        }
    }
    for r in routes {
        let id = r.route_id;
        match &r.kind {
            RouteKind::Direct {
                src, dst, fk_column, ..
            } => {
                let _ = writeln!(out, "    \"{src}\" -> \"{dst}\" [label=\"r{id} {fk_column}\"];");
            }
            RouteKind::Composite {
                src,
                mid,
                dst,
                fk_src_column,
                fk_dst_column,
            } => {
                let _ = writeln!(
                    out,
                    "    \"{src}\" -> \"{mid}\" [label=\"r{id} {fk_src_column}\", style=dashed];"
                );
                let _ = writeln!(
                    out,
                    "    \"{mid}\" -> \"{dst}\" [label=\"r{id} {fk_dst_column}\", style=dashed];"
                );
            }
        }
    }
    out.push_str("}\n");
    out
}
