//! Long-format rolling-group datasets.
//!
//! One row per client-session observation. Sessions belong to a rolling group
//! and carry their position within it; clients carry baseline covariates that
//! are centered once at construction.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// One row of the canonical CSV before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub client_id: String,
    pub session_id: String,
    pub group_id: String,
    pub session_order: u32,
    pub module_index: Option<u32>,
    pub time_weeks: f64,
    pub y: Option<f64>,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Index into [`Dataset::clients`].
    pub client: usize,
    /// Index into [`Dataset::sessions`].
    pub session: usize,
    pub time_weeks: f64,
    /// `None` marks a missing outcome.
    pub outcome: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub group_id: String,
    /// 1-based position within the rolling group.
    pub order_index: u32,
    pub module_index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub id: String,
    /// Missing-data pattern R_i; `Some(true)` is the short-stay pattern.
    pub pattern: Option<bool>,
    /// Covariates centered about their mean over clients.
    pub covariates: Vec<f64>,
    /// Covariates as supplied.
    pub raw_covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Sorted by (client, session position).
    pub observations: Vec<Observation>,
    /// Sorted by (group_id, order_index).
    pub sessions: Vec<Session>,
    /// Sorted by client id.
    pub clients: Vec<Client>,
    pub covariate_names: Vec<String>,
    /// Means removed from each covariate column at construction.
    pub covariate_means: Vec<f64>,
}

/// Column names used by [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub client_id: String,
    pub session_id: String,
    pub group_id: String,
    pub session_order: String,
    pub module_index: String,
    pub time_weeks: String,
    pub y: String,
    /// Any column whose name starts with this prefix is a covariate.
    pub covariate_prefix: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            client_id: "client_id".into(),
            session_id: "session_id".into(),
            group_id: "group_id".into(),
            session_order: "session_order".into(),
            module_index: "module_index".into(),
            time_weeks: "time_weeks".into(),
            y: "y".into(),
            covariate_prefix: "x_".into(),
        }
    }
}

impl Dataset {
    /// Validates raw rows and builds a canonical dataset.
    pub fn from_records(records: Vec<Record>, covariate_names: Vec<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("dataset has no observations".into()));
        }
        let k = covariate_names.len();

        let mut session_map: BTreeMap<String, Session> = BTreeMap::new();
        let mut client_raw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (row, rec) in records.iter().enumerate() {
            let row = row + 1;
            if rec.covariates.len() != k {
                return Err(Error::Validation(format!(
                    "row {row}: expected {k} covariates, found {}",
                    rec.covariates.len()
                )));
            }
            if !rec.time_weeks.is_finite() || rec.time_weeks < 0.0 {
                return Err(Error::Validation(format!(
                    "row {row}: time_weeks must be finite and nonnegative, got {}",
                    rec.time_weeks
                )));
            }
            if rec.y.is_some_and(|y| !y.is_finite()) {
                return Err(Error::Validation(format!("row {row}: outcome is not finite")));
            }
            if rec.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("row {row}: covariate is not finite")));
            }
            let session = Session {
                id: rec.session_id.clone(),
                group_id: rec.group_id.clone(),
                order_index: rec.session_order,
                module_index: rec.module_index,
            };
            match session_map.get(&rec.session_id) {
                Some(existing) if *existing != session => {
                    return Err(Error::Validation(format!(
                        "row {row}: session {} has inconsistent group/order/module attributes",
                        rec.session_id
                    )))
                }
                Some(_) => {}
                None => {
                    session_map.insert(rec.session_id.clone(), session);
                }
            }
            match client_raw.get(&rec.client_id) {
                Some(existing) if *existing != rec.covariates => {
                    return Err(Error::Validation(format!(
                        "row {row}: covariates of client {} vary across rows",
                        rec.client_id
                    )))
                }
                Some(_) => {}
                None => {
                    client_raw.insert(rec.client_id.clone(), rec.covariates.clone());
                }
            }
        }

        let mut sessions: Vec<Session> = session_map.into_values().collect();
        sessions.sort_by(|a, b| {
            (a.group_id.as_str(), a.order_index).cmp(&(b.group_id.as_str(), b.order_index))
        });
        // Orders within a group must be 1..=m.
        let mut expected: HashMap<&str, u32> = HashMap::new();
        for s in &sessions {
            let next = expected.entry(s.group_id.as_str()).or_insert(1);
            if s.order_index != *next {
                return Err(Error::Validation(format!(
                    "group {}: session orders must be consecutive from 1, found {} where {} was expected",
                    s.group_id, s.order_index, next
                )));
            }
            *next += 1;
        }
        let session_index: HashMap<&str, usize> = sessions
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();

        let mut covariate_means = vec![0.0; k];
        for raw in client_raw.values() {
            for (m, x) in covariate_means.iter_mut().zip(raw) {
                *m += x;
            }
        }
        let n_clients = client_raw.len() as f64;
        covariate_means.iter_mut().for_each(|m| *m /= n_clients);
        let clients: Vec<Client> = client_raw
            .into_iter()
            .map(|(id, raw)| Client {
                id,
                pattern: None,
                covariates: raw.iter().zip(&covariate_means).map(|(x, m)| x - m).collect(),
                raw_covariates: raw,
            })
            .collect();
        let client_index: HashMap<&str, usize> = clients
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();

        let mut observations = Vec::with_capacity(records.len());
        for rec in &records {
            observations.push(Observation {
                client: client_index[rec.client_id.as_str()],
                session: session_index[rec.session_id.as_str()],
                time_weeks: rec.time_weeks,
                outcome: rec.y,
            });
        }
        observations.sort_by_key(|o| (o.client, o.session));
        for pair in observations.windows(2) {
            if pair[0].client == pair[1].client && pair[0].session == pair[1].session {
                return Err(Error::Validation(format!(
                    "duplicate observation for client {} in session {}",
                    clients[pair[0].client].id, sessions[pair[0].session].id
                )));
            }
        }

        Ok(Self {
            observations,
            sessions,
            clients,
            covariate_names,
            covariate_means,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Distinct group ids in session order.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.sessions {
            if out.last() != Some(&s.group_id.as_str()) {
                out.push(&s.group_id);
            }
        }
        out
    }

    /// Indices of observations whose outcome is missing.
    pub fn missing_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.outcome.is_none())
            .map(|(i, _)| i)
    }

    pub fn n_observed(&self) -> usize {
        self.observations.iter().filter(|o| o.outcome.is_some()).count()
    }

    pub fn has_patterns(&self) -> bool {
        self.clients.iter().all(|c| c.pattern.is_some())
    }

    /// Number of sessions each client attended (rows, observed or not).
    pub fn sessions_per_client(&self) -> Vec<usize> {
        let mut counts = vec![0; self.clients.len()];
        for o in &self.observations {
            counts[o.client] += 1;
        }
        counts
    }

    /// Sets R_i = 1 for clients attending fewer than `threshold` sessions.
    pub fn derive_pattern_indicators(mut self, threshold: usize) -> Self {
        let counts = self.sessions_per_client();
        for (client, n) in self.clients.iter_mut().zip(counts) {
            client.pattern = Some(n < threshold);
        }
        self
    }

    pub fn attendance_summary(&self) -> AttendanceSummary {
        let per_client = self.sessions_per_client();
        let mut per_session = vec![0; self.sessions.len()];
        for o in &self.observations {
            per_session[o.session] += 1;
        }
        let mut histogram = BTreeMap::new();
        for &n in &per_client {
            *histogram.entry(n).or_insert(0) += 1;
        }
        AttendanceSummary {
            per_client,
            per_session,
            histogram,
        }
    }

    /// Rows in canonical order, with raw (uncentered) covariates.
    pub fn to_records(&self) -> Vec<Record> {
        self.observations
            .iter()
            .map(|o| {
                let s = &self.sessions[o.session];
                let c = &self.clients[o.client];
                Record {
                    client_id: c.id.clone(),
                    session_id: s.id.clone(),
                    group_id: s.group_id.clone(),
                    session_order: s.order_index,
                    module_index: s.module_index,
                    time_weeks: o.time_weeks,
                    y: o.outcome,
                    covariates: c.raw_covariates.clone(),
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "client_id",
            "session_id",
            "group_id",
            "session_order",
            "module_index",
            "time_weeks",
            "y",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for rec in self.to_records() {
            let mut row = vec![
                rec.client_id,
                rec.session_id,
                rec.group_id,
                rec.session_order.to_string(),
                rec.module_index.map(|m| m.to_string()).unwrap_or_default(),
                rec.time_weeks.to_string(),
                rec.y.map(|y| y.to_string()).unwrap_or_default(),
            ];
            row.extend(rec.covariates.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttendanceSummary {
    /// Sessions attended by each client.
    pub per_client: Vec<usize>,
    /// Attendees of each session.
    pub per_session: Vec<usize>,
    /// sessions attended -> number of clients.
    pub histogram: BTreeMap<usize, usize>,
}

impl AttendanceSummary {
    /// Fraction of clients attending at least `n` sessions.
    pub fn fraction_at_least(&self, n: usize) -> f64 {
        let hits = self.per_client.iter().filter(|&&c| c >= n).count();
        hits as f64 / self.per_client.len() as f64
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::Parse {
            row: 0,
            message: format!("missing required column `{name}`"),
        })
    };
    let c_client = require(&schema.client_id)?;
    let c_session = require(&schema.session_id)?;
    let c_group = require(&schema.group_id)?;
    let c_order = require(&schema.session_order)?;
    let c_time = require(&schema.time_weeks)?;
    let c_y = require(&schema.y)?;
    let c_module = find(&schema.module_index);
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with(&schema.covariate_prefix))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Header is row 1.
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |col: usize| row.get(col).unwrap_or("").trim();
        let parse_err = |what: &str, value: &str| Error::Parse {
            row: row_no,
            message: format!("cannot parse {what} from `{value}`"),
        };
        let nonempty = |col: usize, what: &str| {
            let v = field(col);
            if v.is_empty() {
                Err(Error::Parse {
                    row: row_no,
                    message: format!("empty {what}"),
                })
            } else {
                Ok(v.to_string())
            }
        };
        let order_raw = field(c_order);
        let session_order: u32 = order_raw
            .parse()
            .map_err(|_| parse_err("session_order", order_raw))?;
        let module_index = match c_module.map(field) {
            None | Some("") => None,
            Some(v) => Some(v.parse().map_err(|_| parse_err("module_index", v))?),
        };
        let time_raw = field(c_time);
        let time_weeks: f64 = time_raw
            .parse()
            .map_err(|_| parse_err("time_weeks", time_raw))?;
        let y = match field(c_y) {
            "" => None,
            v => Some(v.parse::<f64>().map_err(|_| parse_err("y", v))?),
        };
        let covariates = covariate_cols
            .iter()
            .map(|(col, name)| {
                let v = field(*col);
                v.parse::<f64>().map_err(|_| parse_err(name, v))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(Record {
            client_id: nonempty(c_client, "client_id")?,
            session_id: nonempty(c_session, "session_id")?,
            group_id: nonempty(c_group, "group_id")?,
            session_order,
            module_index,
            time_weeks,
            y,
            covariates,
        });
    }
    Dataset::from_records(records, covariate_cols.into_iter().map(|(_, n)| n).collect())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dataset.write_csv(std::io::BufWriter::new(file))
}
