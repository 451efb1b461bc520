use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ColumnData, Database, EntityGraph, TableData};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::schema::SchemaDef;
use crate::tensor::{Tape, Tensor, Var};

const SECONDS_PER_DAY: f64 = 86_400.0;
const MAX_EMBED_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeEncoderConfig {
    #[default]
    None,
    /// `sin(ω_i Δt + φ_i)` with learned `ω`, `φ`.
    Time2Vec { dim: usize },
    /// `cos(Δt ω_i)` with `ω_i = alpha^(-(i-1)/beta)`.
    FixedCos { dim: usize, alpha: f64, beta: f64 },
}

impl TimeEncoderConfig {
    pub fn dim(&self) -> usize {
        match *self {
            TimeEncoderConfig::None => 0,
            TimeEncoderConfig::Time2Vec { dim } | TimeEncoderConfig::FixedCos { dim, .. } => dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimeEncoderConfig::None => Ok(()),
            TimeEncoderConfig::Time2Vec { dim } if dim >= 1 => Ok(()),
            TimeEncoderConfig::FixedCos { dim, alpha, beta } if dim >= 1 && alpha > 0.0 && beta > 0.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid time encoder {other:?}"))),
        }
    }

    /// Frequencies of the fixed cosine encoding, `None` for other variants.
    pub fn fixed_frequencies(&self) -> Option<Vec<f64>> {
        match *self {
            TimeEncoderConfig::FixedCos { dim, alpha, beta } => {
                Some((0..dim).map(|i| alpha.powf(-(i as f64) / beta)).collect())
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    pub std: f64,
}

/// Training-split dictionary; unseen values map to `oov()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    values: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CategoricalVocab {
    fn from_values(values: Vec<String>) -> Self {
        let index = values.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        Self { values, index }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn oov(&self) -> usize {
        self.values.len()
    }

    /// Embedding rows needed: one per known value plus the OOV row.
    pub fn rows(&self) -> usize {
        self.values.len() + 1
    }

    pub fn embed_width(&self) -> usize {
        self.values.len().clamp(1, MAX_EMBED_WIDTH)
    }

    pub fn lookup(&self, value: Option<&str>) -> usize {
        value
            .and_then(|v| self.index.get(v).copied())
            .unwrap_or(self.oov())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ColumnEncoder {
    /// Standardized value plus a missingness indicator.
    Numeric(NumericStats),
    Categorical(CategoricalVocab),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    /// One encoder per feature column, in column order.
    pub columns: Vec<ColumnEncoder>,
}

/// Encoded feature columns of a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRows {
    /// `rows x (2 * numeric columns)`: value then missing flag per column.
    pub numeric: Tensor,
    /// Vocabulary indices per categorical column.
    pub categorical: Vec<Vec<usize>>,
}

impl TableEncoder {
    pub fn numeric_width(&self) -> usize {
        2 * self
            .columns
            .iter()
            .filter(|c| matches!(c, ColumnEncoder::Numeric(_)))
            .count()
    }

    pub fn vocabularies(&self) -> impl Iterator<Item = &CategoricalVocab> {
        self.columns.iter().filter_map(|c| match c {
            ColumnEncoder::Categorical(v) => Some(v),
            ColumnEncoder::Numeric(_) => None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn encode(&self, data: &TableData, rows: &[usize]) -> Result<EncodedRows> {
        let width = self.numeric_width();
        let mut numeric = Tensor::zeros(rows.len(), width);
        let mut categorical = Vec::new();
        let mut slot = 0;
        for (enc, col) in self.columns.iter().zip(&data.attributes) {
            match enc {
                ColumnEncoder::Numeric(stats) => {
                    for (i, &r) in rows.iter().enumerate() {
                        match numeric_value(col, r) {
                            Some(x) => {
                                let z = (x - stats.mean) / stats.std;
                                if !z.is_finite() {
                                    return Err(Error::NonFinite(format!(
                                        "standardized value of row {r}"
                                    )));
                                }
                                numeric.set(i, slot, z);
                            }
                            None => numeric.set(i, slot + 1, 1.0),
                        }
                    }
                    slot += 2;
                }
                ColumnEncoder::Categorical(vocab) => {
                    let ColumnData::Categorical(values) = col else {
                        unreachable!("encoder fitted on this column")
                    };
                    categorical.push(rows.iter().map(|&r| vocab.lookup(values[r].as_deref())).collect());
                }
            }
        }
        Ok(EncodedRows {
            numeric,
            categorical,
        })
    }
}

fn numeric_value(col: &ColumnData, row: usize) -> Option<f64> {
    match col {
        ColumnData::Numeric(v) => v[row],
        ColumnData::Timestamp(v) => v[row].map(|t| t as f64),
        ColumnData::Categorical(_) => None,
    }
}

/// Per-table column encoders fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub tables: Vec<TableEncoder>,
}

impl FeatureEncoder {
    /// Fits encoders using the rows flagged in `train_mask[table]`.
    pub fn fit(db: &Database, train_mask: &[Vec<bool>]) -> Result<Self> {
        let mut tables = Vec::with_capacity(db.tables.len());
        for ((def, data), mask) in db.schema.tables.iter().zip(&db.tables).zip(train_mask) {
            if mask.len() != data.len() {
                return Err(Error::InvalidArgument(format!(
                    "train mask for `{}` has {} entries for {} rows",
                    def.name,
                    mask.len(),
                    data.len()
                )));
            }
            if !data.is_empty() && !mask.iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!(
                    "no training rows for non-empty table `{}`",
                    def.name
                )));
            }
            let train_rows: Vec<usize> = (0..data.len()).filter(|&r| mask[r]).collect();
            let columns = data
                .attributes
                .iter()
                .map(|col| match col {
                    ColumnData::Categorical(values) => {
                        let mut seen = Vec::new();
                        let mut set = std::collections::HashSet::new();
                        for &r in &train_rows {
                            if let Some(v) = &values[r] {
                                if set.insert(v.as_str()) {
                                    seen.push(v.clone());
                                }
                            }
                        }
                        ColumnEncoder::Categorical(CategoricalVocab::from_values(seen))
                    }
                    other => {
                        let xs: Vec<f64> = train_rows.iter().filter_map(|&r| numeric_value(other, r)).collect();
                        ColumnEncoder::Numeric(standardizer(&xs))
                    }
                })
                .collect();
            tables.push(TableEncoder { columns });
        }
        Ok(Self { tables })
    }

    /// Restores lookup indices after deserialization.
    pub fn reindex(&mut self) {
        for t in &mut self.tables {
            for c in &mut t.columns {
                if let ColumnEncoder::Categorical(v) = c {
                    *v = CategoricalVocab::from_values(std::mem::take(&mut v.values));
                }
            }
        }
    }
}

fn standardizer(xs: &[f64]) -> NumericStats {
    if xs.is_empty() {
        return NumericStats { mean: 0.0, std: 1.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    NumericStats {
        mean,
        std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
    }
}

#[derive(Clone, Debug)]
struct TypeInput {
    projection: Option<(ParamId, ParamId)>,
    constant: Option<ParamId>,
    embeddings: Vec<ParamId>,
    has_time: bool,
}

/// Learned parameters mapping encoded columns to `d_model`-wide embeddings.
#[derive(Clone, Debug)]
pub struct InputParams {
    types: Vec<TypeInput>,
    time: TimeEncoderConfig,
    time2vec: Option<(ParamId, ParamId)>,
    d_model: usize,
}

impl InputParams {
    pub fn new(
        store: &mut ParamStore,
        schema: &SchemaDef,
        encoder: &FeatureEncoder,
        d_model: usize,
        time: TimeEncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let time2vec = match time {
            TimeEncoderConfig::Time2Vec { dim } => Some((
                store.add_glorot("input/time2vec/omega", 1, dim, rng),
                store.add_glorot("input/time2vec/phi", 1, dim, rng),
            )),
            _ => None,
        };
        let types = schema
            .tables
            .iter()
            .zip(&encoder.tables)
            .map(|(def, enc)| {
                let has_time = def.time_column.is_some();
                let embeddings: Vec<ParamId> = enc
                    .vocabularies()
                    .enumerate()
                    .map(|(k, v)| store.add_glorot(format!("input/{}/embed{k}", def.name), v.rows(), v.embed_width(), rng))
                    .collect();
                let raw_width = enc.numeric_width()
                    + enc.vocabularies().map(CategoricalVocab::embed_width).sum::<usize>()
                    + if has_time { time.dim() } else { 0 };
                if enc.is_empty() && (time.dim() == 0 || !has_time) {
                    TypeInput {
                        projection: None,
                        constant: Some(store.add_glorot(format!("input/{}/constant", def.name), 1, d_model, rng)),
                        embeddings,
                        has_time,
                    }
                } else {
                    let w = store.add_glorot(format!("input/{}/weight", def.name), raw_width, d_model, rng);
                    let b = store.add_zeros(format!("input/{}/bias", def.name), 1, d_model);
                    TypeInput {
                        projection: Some((w, b)),
                        constant: None,
                        embeddings,
                        has_time,
                    }
                }
            })
            .collect();
        Self {
            types,
            time,
            time2vec,
            d_model,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// The time-encoding block for the given elapsed times (seconds).
    pub fn time_block(&self, tape: &Tape, bound: &Bound, elapsed: &[i64]) -> Result<Option<Var>> {
        let days: Vec<f64> = elapsed.iter().map(|&s| s as f64 / SECONDS_PER_DAY).collect();
        match self.time {
            TimeEncoderConfig::None => Ok(None),
            TimeEncoderConfig::FixedCos { dim, .. } => {
                let freq = self.time.fixed_frequencies().expect("fixed");
                let mut t = Tensor::zeros(days.len(), dim);
                for (r, d) in days.iter().enumerate() {
                    for (c, w) in freq.iter().enumerate() {
                        t.set(r, c, (d * w).cos());
                    }
                }
                Ok(Some(tape.constant(t)))
            }
            TimeEncoderConfig::Time2Vec { .. } => {
                let (omega, phi) = self.time2vec.expect("time2vec params");
                let dt = tape.constant(Tensor::column(days));
                let lin = tape.matmul(dt, bound.var(omega))?;
                let lin = tape.add_row(lin, bound.var(phi))?;
                Ok(Some(tape.sin(lin)))
            }
        }
    }
}

/// Initial embeddings `h^(0)` for `rows` of node-type `ty`. `seed_times[i]`
/// is the seed time that row `i` is being encoded for.
#[allow(clippy::too_many_arguments)]
pub fn encode_nodes(
    tape: &Tape,
    bound: &Bound,
    params: &InputParams,
    graph: &EntityGraph,
    encoder: &FeatureEncoder,
    ty: usize,
    rows: &[usize],
    seed_times: &[i64],
) -> Result<Var> {
    if rows.len() != seed_times.len() {
        return Err(Error::Shape(format!(
            "{} rows with {} seed times",
            rows.len(),
            seed_times.len()
        )));
    }
    let input = &params.types[ty];
    if let Some(c) = input.constant {
        return tape.gather_rows(bound.var(c), &vec![0; rows.len()]);
    }
    let (w, b) = input.projection.expect("projection or constant");
    let enc = encoder.tables[ty].encode(&graph.database().tables[ty], rows)?;
    let mut parts = Vec::new();
    if enc.numeric.cols() > 0 {
        parts.push(tape.constant(enc.numeric));
    }
    for (emb, idx) in input.embeddings.iter().zip(&enc.categorical) {
        parts.push(tape.gather_rows(bound.var(*emb), idx)?);
    }
    if input.has_time {
        let ts = graph.timestamps(ty).expect("time column");
        let elapsed: Vec<i64> = rows.iter().zip(seed_times).map(|(&r, &s)| s - ts[r]).collect();
        if let Some(block) = params.time_block(tape, bound, &elapsed)? {
            parts.push(block);
        }
    }
    let raw = tape.concat_cols(&parts)?;
    let h = tape.matmul(raw, bound.var(w))?;
    tape.add_row(h, bound.var(b))
}
