//! Synthetic databases with planted bridge and hub signals.
//!
//! Bridge: `src(x0..)`, `dst()`, `mid(src_id, dst_id, noise.., t)`. A dst
//! row is positive when the mean first attribute of the src rows reached
//! through its mids is positive.
//!
//! Hub: entity tables `a`, `b`, `c` and `hub(a_id, b_id, c_id, noise.., t)`.
//! An `a` row is positive when the sum over its hubs of
//! `b.x0 * c.x0` is positive. Every `a` row has one affiliated `c` row
//! that all of its hubs use, so the sum factors as `c.x0 * Σ b.x0`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::entity_graph::Database;
use crate::error::{Error, Result};
use crate::schema::{parse_schema, SchemaDef};
use crate::train::{TaskKind, TaskSpec};

/// Relative path of the training table inside a generated dataset.
pub const TRAINING_TABLE: &str = "tasks/training_table.csv";
const MIN_MIDS_PER_DST: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    Bridge,
    Hub,
}

impl std::str::FromStr for Motif {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bridge" => Ok(Motif::Bridge),
            "hub" => Ok(Motif::Hub),
            other => Err(Error::InvalidArgument(format!("unknown motif `{other}`"))),
        }
    }
}

/// For the hub motif `n_dst` sizes `a`, `n_src` sizes both `b` and `c`,
/// and `n_mid` is the number of hub rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifConfig {
    pub motif: Motif,
    pub n_src: usize,
    pub n_dst: usize,
    pub n_mid: usize,
    pub d_attr: usize,
    pub noise_std: f64,
    /// Probability of flipping each label.
    pub label_noise: f64,
    pub rng_seed: u64,
    /// Mid timestamps are uniform in `[time_start, time_end]` (seconds).
    pub time_start: i64,
    pub time_end: i64,
}

impl MotifConfig {
    pub fn bridge() -> Self {
        Self {
            motif: Motif::Bridge,
            n_src: 200,
            n_dst: 200,
            n_mid: 2000,
            d_attr: 4,
            noise_std: 1.0,
            label_noise: 0.0,
            rng_seed: 0,
            time_start: 1_577_836_800,
            time_end: 1_609_459_200,
        }
    }

    pub fn hub() -> Self {
        Self {
            motif: Motif::Hub,
            n_src: 150,
            n_dst: 150,
            ..Self::bridge()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_src == 0 || self.n_dst == 0 || self.n_mid == 0 || self.d_attr == 0 {
            return bad("counts and attribute width must be at least 1".into());
        }
        if self.n_mid < self.n_dst * MIN_MIDS_PER_DST {
            return bad(format!(
                "{} connecting rows cannot give each of {} labelled rows {MIN_MIDS_PER_DST}",
                self.n_mid, self.n_dst
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !(0.0..=1.0).contains(&self.label_noise) {
            return bad("noise_std must be finite and non-negative, label_noise in [0, 1]".into());
        }
        if self.time_end < self.time_start {
            return bad("time range is empty".into());
        }
        Ok(())
    }
}

/// A generated database together with its task and training table.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub schema: SchemaDef,
    pub database: Database,
    pub task: TaskSpec,
    pub training_table: String,
}

impl SyntheticDataset {
    /// Writes `schema.json`, one CSV per table, `task.json` and the
    /// training table under `tasks/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tasks = dir.join("tasks");
        std::fs::create_dir_all(&tasks).map_err(|e| Error::io(&tasks, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("schema.json", &self.schema.to_json())?;
        self.database.write_csvs(dir)?;
        put("task.json", &self.task.to_json())?;
        put(TRAINING_TABLE, &self.training_table)
    }
}

/// `mean_{m ∈ mids} src_first[m] > 0` per dst, `mids[d]` listing the src
/// row of each mid of `d` (with multiplicity).
pub fn bridge_labels(src_first: &[f64], mids: &[Vec<usize>]) -> Vec<bool> {
    mids.iter()
        .map(|srcs| !srcs.is_empty() && srcs.iter().map(|&s| src_first[s]).sum::<f64>() / srcs.len() as f64 > 0.0)
        .collect()
}

/// `Σ_{(b, c) ∈ hubs} b_first[b] · c_first[c] > 0` per `a` row.
pub fn hub_labels(b_first: &[f64], c_first: &[f64], hubs: &[Vec<(usize, usize)>]) -> Vec<bool> {
    hubs.iter()
        .map(|pairs| pairs.iter().map(|&(b, c)| b_first[b] * c_first[c]).sum::<f64>() > 0.0)
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn attr_columns(prefix: &str, d: usize) -> String {
    (0..d)
        .map(|i| format!(r#"{{"name":"{prefix}{i}","kind":"numeric"}}"#))
        .collect::<Vec<_>>()
        .join(",")
}

/// Assigns `n_mid` rows to `n_dst` owners: every owner gets
/// `MIN_MIDS_PER_DST`, the rest are uniform; returned in shuffled order.
fn owners(n_dst: usize, n_mid: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n_dst * MIN_MIDS_PER_DST).map(|i| i % n_dst).collect();
    v.extend((v.len()..n_mid).map(|_| rng.gen_range(0..n_dst)));
    v.shuffle(rng);
    v
}

fn cell(x: f64) -> String {
    format!("{x:?}")
}

fn entity_rows(prefix: &str, attrs: &[Vec<f64>]) -> Vec<Vec<String>> {
    attrs
        .iter()
        .enumerate()
        .map(|(i, xs)| std::iter::once(format!("{prefix}{i}")).chain(xs.iter().map(|&x| cell(x))).collect())
        .collect()
}

fn header(cols: &[&str], prefix: &str, d: usize) -> Vec<String> {
    cols.iter()
        .map(|c| c.to_string())
        .chain((0..d).map(|i| format!("{prefix}{i}")))
        .collect()
}

fn flip(labels: Vec<bool>, p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    labels
        .into_iter()
        .map(|y| if p > 0.0 && rng.gen::<f64>() < p { !y } else { y })
        .collect()
}

fn training_table(prefix: &str, labels: &[bool], time: i64) -> String {
    let mut s = String::from("entity_id,timestamp,label\n");
    for (i, &y) in labels.iter().enumerate() {
        s.push_str(&format!("{prefix}{i},{time},{}\n", u8::from(y)));
    }
    s
}

pub fn generate(cfg: &MotifConfig) -> Result<SyntheticDataset> {
    match cfg.motif {
        Motif::Bridge => generate_bridge_db(cfg),
        Motif::Hub => generate_hub_db(cfg),
    }
}

pub fn generate_bridge_db(cfg: &MotifConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = cfg.d_attr;
    let schema = parse_schema(&format!(
        r#"{{"tables":[
            {{"name":"src","primary_key":"id","attributes":[{}]}},
            {{"name":"dst","primary_key":"id"}},
            {{"name":"mid","primary_key":"id",
              "foreign_keys":[{{"column":"src_id","target":"src"}},{{"column":"dst_id","target":"dst"}}],
              "attributes":[{},{{"name":"t","kind":"timestamp"}}],"time_column":"t"}}
        ]}}"#,
        attr_columns("x", d),
        attr_columns("noise", d)
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let src: Vec<Vec<f64>> = (0..cfg.n_src).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    let owner = owners(cfg.n_dst, cfg.n_mid, &mut rng);
    let mut per_dst = vec![Vec::new(); cfg.n_dst];
    let mut mid_rows = Vec::with_capacity(cfg.n_mid);
    let mut max_t = cfg.time_start;
    for (m, &dst) in owner.iter().enumerate() {
        let s = rng.gen_range(0..cfg.n_src);
        per_dst[dst].push(s);
        let t = rng.gen_range(cfg.time_start..=cfg.time_end);
        max_t = max_t.max(t);
        let mut row = vec![format!("m{m}"), format!("s{s}"), format!("d{dst}")];
        row.extend((0..d).map(|_| cell(cfg.noise_std * normal(&mut rng))));
        row.push(t.to_string());
        mid_rows.push(row);
    }
    let first: Vec<f64> = src.iter().map(|x| x[0]).collect();
    let labels = flip(bridge_labels(&first, &per_dst), cfg.label_noise, &mut rng);

    let mut mid_header = header(&["id", "src_id", "dst_id"], "noise", d);
    mid_header.push("t".into());
    let database = Database::from_cells(
        &schema,
        vec![header(&["id"], "x", d), header(&["id"], "", 0), mid_header],
        vec![
            entity_rows("s", &src),
            (0..cfg.n_dst).map(|i| vec![format!("d{i}")]).collect(),
            mid_rows,
        ],
    )?;
    Ok(SyntheticDataset {
        schema,
        database,
        task: TaskSpec {
            kind: TaskKind::Classification,
            entity_table: "dst".into(),
            training_table_csv: TRAINING_TABLE.into(),
            k: None,
            destination_table: None,
        },
        training_table: training_table("d", &labels, max_t + 1),
    })
}

pub fn generate_hub_db(cfg: &MotifConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let d = cfg.d_attr;
    let schema = parse_schema(&format!(
        r#"{{"tables":[
            {{"name":"a","primary_key":"id","attributes":[{x}]}},
            {{"name":"b","primary_key":"id","attributes":[{x}]}},
            {{"name":"c","primary_key":"id","attributes":[{x}]}},
            {{"name":"hub","primary_key":"id",
              "foreign_keys":[{{"column":"a_id","target":"a"}},{{"column":"b_id","target":"b"}},{{"column":"c_id","target":"c"}}],
              "attributes":[{n},{{"name":"t","kind":"timestamp"}}],"time_column":"t"}}
        ]}}"#,
        x = attr_columns("x", d),
        n = attr_columns("noise", d)
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut table = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect() };
    let (a, b, c) = (table(cfg.n_dst), table(cfg.n_src), table(cfg.n_src));
    let affiliated: Vec<usize> = (0..cfg.n_dst).map(|_| rng.gen_range(0..cfg.n_src)).collect();
    let owner = owners(cfg.n_dst, cfg.n_mid, &mut rng);
    let mut per_a = vec![Vec::new(); cfg.n_dst];
    let mut hub_rows = Vec::with_capacity(cfg.n_mid);
    let mut max_t = cfg.time_start;
    for (h, &ai) in owner.iter().enumerate() {
        let bi = rng.gen_range(0..cfg.n_src);
        let ci = affiliated[ai];
        per_a[ai].push((bi, ci));
        let t = rng.gen_range(cfg.time_start..=cfg.time_end);
        max_t = max_t.max(t);
        let mut row = vec![format!("h{h}"), format!("a{ai}"), format!("b{bi}"), format!("c{ci}")];
        row.extend((0..d).map(|_| cell(cfg.noise_std * normal(&mut rng))));
        row.push(t.to_string());
        hub_rows.push(row);
    }
    let bf: Vec<f64> = b.iter().map(|x| x[0]).collect();
    let cf: Vec<f64> = c.iter().map(|x| x[0]).collect();
    let labels = flip(hub_labels(&bf, &cf, &per_a), cfg.label_noise, &mut rng);

    let mut hub_header = header(&["id", "a_id", "b_id", "c_id"], "noise", d);
    hub_header.push("t".into());
    let database = Database::from_cells(
        &schema,
        vec![header(&["id"], "x", d), header(&["id"], "x", d), header(&["id"], "x", d), hub_header],
        vec![entity_rows("a", &a), entity_rows("b", &b), entity_rows("c", &c), hub_rows],
    )?;
    Ok(SyntheticDataset {
        schema,
        database,
        task: TaskSpec {
            kind: TaskKind::Classification,
            entity_table: "a".into(),
            training_table_csv: TRAINING_TABLE.into(),
            k: None,
            destination_table: None,
        },
        training_table: training_table("a", &labels, max_t + 1),
    })
}

/// A small random database for fuzzing: 2 to 6 tables, up to three
/// foreign keys each (self-references included), nullable keys, and time
/// columns on most tables with timestamps in `[0, 100]`.
pub fn random_temporal_database(rng_seed: u64) -> Result<Database> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_tables = rng.gen_range(2..=6);
    let sizes: Vec<usize> = (0..n_tables).map(|_| rng.gen_range(1..=12)).collect();
    let mut defs = Vec::with_capacity(n_tables);
    let mut headers = Vec::with_capacity(n_tables);
    let mut rows = Vec::with_capacity(n_tables);
    for (t, &n) in sizes.iter().enumerate() {
        let targets: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(0..n_tables)).collect();
        let nullable: Vec<bool> = targets.iter().map(|_| rng.gen_bool(0.3)).collect();
        let timed = rng.gen_bool(0.7);
        let fks: Vec<String> = targets
            .iter()
            .zip(&nullable)
            .enumerate()
            .map(|(j, (target, null))| format!(r#"{{"column":"fk{j}","target":"t{target}","nullable":{null}}}"#))
            .collect();
        let mut attrs = vec![r#"{"name":"x","kind":"numeric"}"#.to_string()];
        if timed {
            attrs.push(r#"{"name":"t","kind":"timestamp"}"#.into());
        }
        defs.push(format!(
            r#"{{"name":"t{t}","primary_key":"id","foreign_keys":[{}],"attributes":[{}]{}}}"#,
            fks.join(","),
            attrs.join(","),
            if timed { r#","time_column":"t""# } else { "" }
        ));
        let mut header = vec!["id".to_string()];
        header.extend((0..targets.len()).map(|j| format!("fk{j}")));
        header.push("x".into());
        if timed {
            header.push("t".into());
        }
        headers.push(header);
        rows.push(
            (0..n)
                .map(|r| {
                    let mut row = vec![format!("r{r}")];
                    for (&target, &null) in targets.iter().zip(&nullable) {
                        row.push(if null && rng.gen_bool(0.3) {
                            String::new()
                        } else {
                            format!("r{}", rng.gen_range(0..sizes[target]))
                        });
                    }
                    row.push(cell(normal(&mut rng)));
                    if timed {
                        row.push(rng.gen_range(0..=100).to_string());
                    }
                    row
                })
                .collect(),
        );
    }
    let schema = parse_schema(&format!(r#"{{"tables":[{}]}}"#, defs.join(",")))?;
    Database::from_cells(&schema, headers, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity_graph::load_database;

    fn small(motif: Motif) -> MotifConfig {
        MotifConfig {
            motif,
            n_src: 12,
            n_dst: 10,
            n_mid: 60,
            d_attr: 2,
            ..MotifConfig::bridge()
        }
    }

    #[test]
    fn bridge_label_rule() {
        assert_eq!(bridge_labels(&[1.0, -0.5], &[vec![0, 0, 1]]), vec![true]);
        assert_eq!(bridge_labels(&[0.0, 0.0], &[vec![0, 1, 1]]), vec![false]);
    }

    #[test]
    fn hub_label_rule() {
        assert_eq!(hub_labels(&[1.0], &[1.0], &[vec![(0, 0)]]), vec![true]);
        assert_eq!(hub_labels(&[0.0, 0.0], &[3.0, -1.0], &[vec![(0, 0), (1, 1)]]), vec![false]);
        let (b, c) = ([0.7, -1.1], [0.4, 2.0]);
        let hubs = vec![vec![(0, 1), (1, 0)], vec![(1, 1)]];
        let flipped = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        assert_eq!(hub_labels(&b, &c, &hubs), hub_labels(&flipped(&b), &flipped(&c), &hubs));
    }

    #[test]
    fn generation_is_deterministic_and_loadable() {
        for motif in [Motif::Bridge, Motif::Hub] {
            let cfg = small(motif);
            let a = generate(&cfg).unwrap();
            let b = generate(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            a.write(dir.path()).unwrap();
            let loaded = load_database(&a.schema, dir.path()).unwrap();
            for t in 0..a.schema.tables.len() {
                assert_eq!(a.database.table_csv(t), b.database.table_csv(t));
                assert_eq!(loaded.table_csv(t), a.database.table_csv(t));
            }
            assert_eq!(a.training_table, b.training_table);
        }
    }

    #[test]
    fn every_dst_has_three_mids() {
        let ds = generate(&small(Motif::Bridge)).unwrap();
        let fk = &ds.database.tables[2].foreign_keys[1];
        let mut counts = [0; 10];
        for d in fk.iter().flatten() {
            counts[*d] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 3));
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let cfg = MotifConfig {
            n_mid: 29,
            ..small(Motif::Hub)
        };
        assert!(matches!(generate(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn default_class_balance() {
        // Balanced in expectation only: labelled rows share their sources,
        // so one draw's positive rate moves with the sample mean of the
        // source attributes. The tight band applies to the mean over seeds.
        for base in [MotifConfig::bridge(), MotifConfig::hub()] {
            let seeds = 10;
            let mut total = 0.0;
            for seed in 0..seeds {
                let cfg = MotifConfig { rng_seed: seed, ..base.clone() };
                let ds = generate(&cfg).unwrap();
                let pos = ds.training_table.lines().skip(1).filter(|l| l.ends_with(",1")).count();
                let frac = pos as f64 / cfg.n_dst as f64;
                assert!((0.25..=0.75).contains(&frac), "{:?} seed {seed}: {frac}", cfg.motif);
                total += frac;
            }
            let mean = total / seeds as f64;
            assert!((0.45..=0.55).contains(&mean), "{:?}: {mean}", base.motif);
        }
    }
}
