//! CSV ingestion with referential-integrity checks, and the row-level
//! heterogeneous temporal graph built from it.

mod encode;

pub use encode::{
    encode_nodes, CategoricalVocab, ColumnEncoder, EncodedRows, FeatureEncoder, InputParams,
    NumericStats, TableEncoder, TimeEncoderConfig,
};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, SchemaDef, TableDef};

/// Values of one non-key column. `None` marks an empty CSV cell.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
    Timestamp(Vec<Option<i64>>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
            ColumnData::Timestamp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell(&self, row: usize) -> String {
        match self {
            ColumnData::Numeric(v) => v[row].map(|x| format!("{x:?}")).unwrap_or_default(),
            ColumnData::Categorical(v) => v[row].clone().unwrap_or_default(),
            ColumnData::Timestamp(v) => v[row].map(|x| x.to_string()).unwrap_or_default(),
        }
    }
}

/// Typed contents of one table. Foreign keys are stored resolved to row
/// indices of their target table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableData {
    pub primary_keys: Vec<String>,
    /// One entry per declared foreign key, in declaration order.
    pub foreign_keys: Vec<Vec<Option<usize>>>,
    /// One entry per feature column (attributes minus the time column).
    pub attributes: Vec<ColumnData>,
    /// Seconds; present iff the table declares a time column.
    pub timestamps: Option<Vec<i64>>,
}

impl TableData {
    pub fn len(&self) -> usize {
        self.primary_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary_keys.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Database {
    pub schema: SchemaDef,
    /// Same order as `schema.tables`.
    pub tables: Vec<TableData>,
}

pub(crate) fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
}

pub(crate) struct RawTable {
    pub(crate) header: Vec<String>,
    pub(crate) rows: Vec<Vec<String>>,
}

pub(crate) fn read_csv(path: &Path) -> Result<RawTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(RawTable { header, rows })
}

fn column_positions(table: &TableDef, header: &[String]) -> Result<HashMap<String, usize>> {
    let declared: Vec<&str> = std::iter::once(table.primary_key.as_str())
        .chain(table.foreign_keys.iter().map(|f| f.column.as_str()))
        .chain(table.attributes.iter().map(|c| c.name.as_str()))
        .collect();
    let positions: HashMap<String, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.clone(), i))
        .collect();
    if positions.len() != header.len() {
        return Err(Error::Data(format!("{}.csv: duplicate header column", table.name)));
    }
    if let Some(missing) = declared.iter().find(|c| !positions.contains_key(**c)) {
        return Err(Error::Data(format!("{}.csv: missing column `{missing}`", table.name)));
    }
    if let Some(extra) = header.iter().find(|h| !declared.contains(&h.as_str())) {
        return Err(Error::Data(format!("{}.csv: undeclared column `{extra}`", table.name)));
    }
    Ok(positions)
}

fn parse_column(table: &str, name: &str, kind: ColumnKind, cells: &[&str]) -> Result<ColumnData> {
    let bad = |row: usize, what: &str| {
        Error::Data(format!("{table}.csv row {row}: invalid {what} in column `{name}`: `{}`", cells[row]))
    };
    Ok(match kind {
        ColumnKind::Numeric => ColumnData::Numeric(
            cells
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| bad(r, "number"))
                    }
                })
                .collect::<Result<_>>()?,
        ),
        ColumnKind::Categorical => ColumnData::Categorical(
            cells
                .iter()
                .map(|c| (!c.is_empty()).then(|| c.to_string()))
                .collect(),
        ),
        ColumnKind::Timestamp => ColumnData::Timestamp(
            cells
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        parse_timestamp(c).map(Some).ok_or_else(|| bad(r, "timestamp"))
                    }
                })
                .collect::<Result<_>>()?,
        ),
    })
}

/// Loads `<table>.csv` for every table in `schema` from `dir`, resolving
/// foreign keys against primary keys.
pub fn load_database(schema: &SchemaDef, dir: &Path) -> Result<Database> {
    let raws = schema
        .tables
        .iter()
        .map(|t| read_csv(&dir.join(format!("{}.csv", t.name))))
        .collect::<Result<Vec<_>>>()?;
    Database::from_raw(schema, raws)
}

impl Database {
    /// Builds a database from string cells. `rows[t]` holds the records of
    /// table `t` in the column order given by `headers[t]`.
    pub fn from_cells(schema: &SchemaDef, headers: Vec<Vec<String>>, rows: Vec<Vec<Vec<String>>>) -> Result<Database> {
        let raws = headers
            .into_iter()
            .zip(rows)
            .map(|(header, rows)| RawTable { header, rows })
            .collect();
        Database::from_raw(schema, raws)
    }

    fn from_raw(schema: &SchemaDef, raws: Vec<RawTable>) -> Result<Database> {
        struct Parsed<'a> {
            pks: Vec<String>,
            fk_cells: Vec<Vec<&'a str>>,
        }
        let mut parsed = Vec::with_capacity(raws.len());
        let mut tables = Vec::with_capacity(raws.len());
        let mut pk_index: Vec<HashMap<&str, usize>> = Vec::new();

        for (t, raw) in schema.tables.iter().zip(&raws) {
            let pos = column_positions(t, &raw.header)?;
            for (r, row) in raw.rows.iter().enumerate() {
                if row.len() != raw.header.len() {
                    return Err(Error::Data(format!("{}.csv row {r}: wrong field count", t.name)));
                }
            }
            let col = |name: &str| -> Vec<&str> {
                let i = pos[name];
                raw.rows.iter().map(|r| r[i].as_str()).collect()
            };
            let pk_cells = col(&t.primary_key);
            let mut index = HashMap::with_capacity(pk_cells.len());
            for (r, pk) in pk_cells.iter().enumerate() {
                if pk.is_empty() {
                    return Err(Error::Data(format!("{}.csv row {r}: empty primary key", t.name)));
                }
                if index.insert(*pk, r).is_some() {
                    return Err(Error::Data(format!(
                        "{}.csv row {r}: duplicate primary key `{pk}`",
                        t.name
                    )));
                }
            }
            pk_index.push(index);

            let mut attributes = Vec::new();
            for c in t.feature_columns() {
                attributes.push(parse_column(&t.name, &c.name, c.kind, &col(&c.name))?);
            }
            let timestamps = match &t.time_column {
                None => None,
                Some(tc) => {
                    let cells = col(tc);
                    let mut out = Vec::with_capacity(cells.len());
                    for (r, c) in cells.iter().enumerate() {
                        out.push(parse_timestamp(c).ok_or_else(|| {
                            Error::Data(format!("{}.csv row {r}: invalid time `{c}` in `{tc}`", t.name))
                        })?);
                    }
                    Some(out)
                }
            };
            parsed.push(Parsed {
                pks: pk_cells.iter().map(|s| s.to_string()).collect(),
                fk_cells: t.foreign_keys.iter().map(|f| col(&f.column)).collect(),
            });
            tables.push(TableData {
                primary_keys: Vec::new(),
                foreign_keys: Vec::new(),
                attributes,
                timestamps,
            });
        }

        for (ti, t) in schema.tables.iter().enumerate() {
            let mut resolved = Vec::with_capacity(t.foreign_keys.len());
            for (fk, cells) in t.foreign_keys.iter().zip(&parsed[ti].fk_cells) {
                let target = schema.table_index(&fk.target_table).expect("validated");
                let mut out = Vec::with_capacity(cells.len());
                for (r, cell) in cells.iter().enumerate() {
                    if cell.is_empty() {
                        if !fk.nullable {
                            return Err(Error::ReferentialIntegrity {
                                table: t.name.clone(),
                                row: r,
                                message: format!("empty non-nullable foreign key `{}`", fk.column),
                            });
                        }
                        out.push(None);
                        continue;
                    }
                    match pk_index[target].get(cell) {
                        Some(&row) => out.push(Some(row)),
                        None => {
                            return Err(Error::ReferentialIntegrity {
                                table: t.name.clone(),
                                row: r,
                                message: format!(
                                    "`{}` = `{cell}` matches no primary key of `{}`",
                                    fk.column, fk.target_table
                                ),
                            })
                        }
                    }
                }
                resolved.push(out);
            }
            tables[ti].foreign_keys = resolved;
        }
        for (table, p) in tables.iter_mut().zip(parsed) {
            table.primary_keys = p.pks;
        }
        Ok(Database {
            schema: schema.clone(),
            tables,
        })
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.schema.table_index(name)
    }

    /// Serializes table `t` back to CSV in declared column order.
    pub fn table_csv(&self, t: usize) -> String {
        let def = &self.schema.tables[t];
        let data = &self.tables[t];
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(
            std::iter::once(def.primary_key.as_str())
                .chain(def.foreign_keys.iter().map(|f| f.column.as_str()))
                .chain(def.attributes.iter().map(|c| c.name.as_str())),
        )
        .expect("in-memory write");
        for r in 0..data.len() {
            let mut rec = vec![data.primary_keys[r].clone()];
            for (fk, vals) in def.foreign_keys.iter().zip(&data.foreign_keys) {
                let target = self.schema.table_index(&fk.target_table).expect("validated");
                rec.push(
                    vals[r]
                        .map(|i| self.tables[target].primary_keys[i].clone())
                        .unwrap_or_default(),
                );
            }
            let mut features = data.attributes.iter();
            for c in &def.attributes {
                if def.time_column.as_deref() == Some(c.name.as_str()) {
                    rec.push(data.timestamps.as_ref().expect("time column")[r].to_string());
                } else {
                    rec.push(features.next().expect("feature column").cell(r));
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Writes every table as `<table>.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for (t, def) in self.schema.tables.iter().enumerate() {
            let path = dir.join(format!("{}.csv", def.name));
            fs::write(&path, self.table_csv(t)).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// One foreign-key link with its forward map and reverse CSR adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct FkLink {
    /// Table holding the foreign key.
    pub table: usize,
    /// Position of the key within the table's declared foreign keys.
    pub fk_index: usize,
    pub target: usize,
    pub column: String,
    /// Referencing row -> referenced row.
    pub forward: Vec<Option<usize>>,
    offsets: Vec<usize>,
    referencing: Vec<usize>,
}

impl FkLink {
    fn new(table: usize, fk_index: usize, target: usize, column: String, forward: Vec<Option<usize>>, n_target: usize) -> Self {
        let mut counts = vec![0usize; n_target + 1];
        for &t in forward.iter().flatten() {
            counts[t + 1] += 1;
        }
        for i in 0..n_target {
            counts[i + 1] += counts[i];
        }
        let offsets = counts;
        let mut fill = offsets.clone();
        let mut referencing = vec![0usize; offsets[n_target]];
        for (row, t) in forward.iter().enumerate() {
            if let Some(t) = *t {
                referencing[fill[t]] = row;
                fill[t] += 1;
            }
        }
        Self {
            table,
            fk_index,
            target,
            column,
            forward,
            offsets,
            referencing,
        }
    }

    /// Rows of `table` whose key points at `target_row`, ascending.
    pub fn referencing(&self, target_row: usize) -> &[usize] {
        &self.referencing[self.offsets[target_row]..self.offsets[target_row + 1]]
    }

    pub fn max_in_degree(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Row-level heterogeneous temporal graph: node-types are tables, nodes are
/// rows, and every foreign key is a typed edge set.
#[derive(Clone, Debug)]
pub struct EntityGraph {
    db: Database,
    links: Vec<FkLink>,
    /// `link_of[table][fk_index]` indexes `links`.
    link_of: Vec<Vec<usize>>,
}

pub fn build_entity_graph(db: Database) -> EntityGraph {
    let mut links = Vec::new();
    let mut link_of = Vec::with_capacity(db.tables.len());
    for (ti, (def, data)) in db.schema.tables.iter().zip(&db.tables).enumerate() {
        let mut mine = Vec::new();
        for (k, fk) in def.foreign_keys.iter().enumerate() {
            let target = db.schema.table_index(&fk.target_table).expect("validated");
            mine.push(links.len());
            links.push(FkLink::new(
                ti,
                k,
                target,
                fk.column.clone(),
                data.foreign_keys[k].clone(),
                db.tables[target].len(),
            ));
        }
        link_of.push(mine);
    }
    EntityGraph { db, links, link_of }
}

impl EntityGraph {
    pub fn schema(&self) -> &SchemaDef {
        &self.db.schema
    }

    pub fn database(&self) -> &Database {
        &self.db
    }

    /// Recovers the database; inverse of [`build_entity_graph`].
    pub fn into_database(self) -> Database {
        self.db
    }

    pub fn num_types(&self) -> usize {
        self.db.tables.len()
    }

    pub fn num_nodes(&self, ty: usize) -> usize {
        self.db.tables[ty].len()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.db.schema.table_index(name)
    }

    pub fn timestamps(&self, ty: usize) -> Option<&[i64]> {
        self.db.tables[ty].timestamps.as_deref()
    }

    pub fn timestamp(&self, ty: usize, row: usize) -> Option<i64> {
        self.timestamps(ty).map(|t| t[row])
    }

    pub fn links(&self) -> &[FkLink] {
        &self.links
    }

    /// The link for foreign-key column `column` declared on table `ty`.
    pub fn link(&self, ty: usize, column: &str) -> Option<&FkLink> {
        self.link_of[ty]
            .iter()
            .map(|&i| &self.links[i])
            .find(|l| l.column == column)
    }
}
