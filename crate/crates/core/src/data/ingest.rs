use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Result, Session, Vocabulary};

const HEADER: [&str; 3] = ["session_id", "timestamp", "item_id"];

/// Session and item filtering thresholds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_item_count: u64,
    pub min_session_len: usize,
    pub max_session_len: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_item_count: 5,
            min_session_len: 2,
            max_session_len: None,
        }
    }
}

struct RawSession {
    id: String,
    items: Vec<String>,
    timestamps: Vec<Option<i64>>,
}

pub fn ingest(path: impl AsRef<Path>, filter: &FilterConfig) -> Result<(Vec<Session>, Vocabulary)> {
    let file = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(file), filter)
}

/// Reads a `session_id,timestamp,item_id` CSV, orders each session by time,
/// filters rare items and out-of-range sessions, and indexes the survivors.
///
/// Sessions come back ordered by start time (file order when any session
/// lacks timestamps). Timestamp ties keep file order.
pub fn ingest_reader<R: Read>(reader: R, filter: &FilterConfig) -> Result<(Vec<Session>, Vocabulary)> {
    let mut raw = read_raw(reader)?;
    order_sessions(&mut raw);
    apply_filters(&mut raw, filter);
    if raw.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut vocab = Vocabulary::new();
    let sessions: Vec<Session> = raw
        .into_iter()
        .map(|r| {
            let items = r.items.iter().map(|id| vocab.insert(id)).collect();
            let timestamps = r.timestamps.iter().copied().collect::<Option<Vec<i64>>>();
            Session {
                id: r.id,
                items,
                timestamps,
            }
        })
        .collect();
    vocab.count_from(&sessions);
    Ok((sessions, vocab))
}

fn read_raw<R: Read>(reader: R) -> Result<Vec<RawSession>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(&e))?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header `{}`", HEADER.join(",")),
        });
    }

    let mut order: HashMap<String, usize> = HashMap::new();
    let mut sessions: Vec<RawSession> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let (sid, ts, item) = (&record[0], &record[1], &record[2]);
        if sid.is_empty() || item.is_empty() {
            return Err(DataError::Parse {
                line,
                message: "empty session_id or item_id".into(),
            });
        }
        let ts = if ts.is_empty() {
            None
        } else {
            Some(ts.parse::<i64>().map_err(|_| DataError::Parse {
                line,
                message: format!("timestamp `{ts}` is not an integer"),
            })?)
        };
        let slot = *order.entry(sid.to_owned()).or_insert_with(|| {
            sessions.push(RawSession {
                id: sid.to_owned(),
                items: Vec::new(),
                timestamps: Vec::new(),
            });
            sessions.len() - 1
        });
        sessions[slot].items.push(item.to_owned());
        sessions[slot].timestamps.push(ts);
    }
    Ok(sessions)
}

fn csv_error(e: &csv::Error) -> DataError {
    DataError::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

fn order_sessions(sessions: &mut [RawSession]) {
    for s in sessions.iter_mut() {
        if s.timestamps.iter().all(Option::is_some) {
            let mut rows: Vec<(Option<i64>, String)> =
                s.timestamps.drain(..).zip(s.items.drain(..)).collect();
            rows.sort_by_key(|(t, _)| *t);
            (s.timestamps, s.items) = rows.into_iter().unzip();
        }
    }
    if sessions.iter().all(|s| s.timestamps.iter().all(Option::is_some)) {
        sessions.sort_by_key(|s| s.timestamps.first().copied().flatten());
    }
}

/// Item-count filter, then session-length filter, repeated until neither
/// removes anything.
fn apply_filters(sessions: &mut Vec<RawSession>, filter: &FilterConfig) {
    loop {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in sessions.iter() {
            for id in &s.items {
                *counts.entry(id.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < filter.min_item_count)
            .map(|(id, _)| id.to_owned())
            .collect();

        let before = sessions.len();
        for s in sessions.iter_mut() {
            if s.items.iter().any(|id| rare.contains(id)) {
                let (ts, items) = s
                    .timestamps
                    .iter()
                    .zip(&s.items)
                    .filter(|(_, id)| !rare.contains(*id))
                    .map(|(t, id)| (*t, id.clone()))
                    .unzip();
                s.timestamps = ts;
                s.items = items;
            }
        }
        sessions.retain(|s| {
            s.items.len() >= filter.min_session_len && filter.max_session_len.map_or(true, |m| s.items.len() <= m)
        });
        if rare.is_empty() && sessions.len() == before {
            break;
        }
    }
}

/// Writes sessions back out in the ingest CSV format.
pub fn write_csv<W: Write>(sessions: &[Session], vocab: &Vocabulary, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DataError::Io(std::io::Error::other(e));
    w.write_record(HEADER).map_err(io)?;
    for s in sessions {
        for (k, &item) in s.items.iter().enumerate() {
            let ts = s
                .timestamps
                .as_ref()
                .map(|t| t[k].to_string())
                .unwrap_or_default();
            let id = vocab
                .id_of(item)
                .ok_or(DataError::UnknownIndex { index: item, size: vocab.len() })?;
            w.write_record([s.id.as_str(), ts.as_str(), id]).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
