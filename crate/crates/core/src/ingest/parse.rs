//! Delimited interaction logs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::InteractionEvent;
use crate::error::{Error, Result};

/// Column layout of a delimited log. Extra columns are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogFormat {
    pub delimiter: char,
    pub has_header: bool,
    pub user_column: usize,
    pub item_column: usize,
    pub timestamp_column: usize,
    /// Largest tolerated share of malformed rows.
    pub max_malformed_fraction: f64,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            has_header: false,
            user_column: 0,
            item_column: 1,
            timestamp_column: 2,
            max_malformed_fraction: 0.1,
        }
    }
}

impl LogFormat {
    pub fn csv() -> Self {
        Self {
            delimiter: ',',
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLog {
    pub events: Vec<InteractionEvent>,
    pub malformed: usize,
    pub rows: usize,
}

pub fn parse_log(path: &Path, format: &LogFormat) -> Result<ParsedLog> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_log_bytes(&bytes, format, path)
}

pub fn parse_log_bytes(bytes: &[u8], format: &LogFormat, path: &Path) -> Result<ParsedLog> {
    if !format.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", format.delimiter)));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .has_headers(format.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut events = Vec::new();
    let mut malformed = 0usize;
    let mut rows = 0usize;
    for record in reader.records() {
        rows += 1;
        let Ok(record) = record else {
            malformed += 1;
            continue;
        };
        if record.len() == 1 && record[0].is_empty() {
            rows -= 1;
            continue;
        }
        let field = |i: usize| record.get(i).filter(|s| !s.is_empty());
        let parsed = match (
            field(format.user_column),
            field(format.item_column),
            field(format.timestamp_column).and_then(|t| t.parse::<i64>().ok()),
        ) {
            (Some(u), Some(i), Some(ts)) if ts >= 0 => Some(InteractionEvent {
                user_id: u.to_string(),
                item_id: i.to_string(),
                timestamp: ts,
            }),
            _ => None,
        };
        match parsed {
            Some(ev) => events.push(ev),
            None => malformed += 1,
        }
    }
    if rows == 0 {
        log::warn!("{}: log is empty", path.display());
    } else if malformed as f64 > format.max_malformed_fraction * rows as f64 {
        return Err(Error::format(
            path,
            format!("{malformed} of {rows} rows are malformed"),
        ));
    } else if malformed > 0 {
        log::warn!("{}: skipped {malformed} malformed rows", path.display());
    }
    events.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id))
    });
    Ok(ParsedLog {
        events,
        malformed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedLog> {
        parse_log_bytes(text.as_bytes(), &LogFormat::default(), Path::new("mem"))
    }

    #[test]
    fn well_formed_rows() {
        let out = parse("u2\ti9\t50\nu1\ti1\t20\nu1\ti2\t10\n").unwrap();
        assert_eq!(out.events.len(), 3);
        assert_eq!(out.malformed, 0);
        let order: Vec<_> = out.events.iter().map(|e| (e.user_id.as_str(), e.timestamp)).collect();
        assert_eq!(order, vec![("u1", 10), ("u1", 20), ("u2", 50)]);
    }

    #[test]
    fn bad_timestamp_is_counted() {
        let mut text = String::from("u\tx\tnoon\n");
        for i in 0..20 {
            text.push_str(&format!("u\ti{i}\t{i}\t4.5\n"));
        }
        let out = parse(&text).unwrap();
        assert_eq!(out.events.len(), 20);
        assert_eq!(out.malformed, 1);
    }

    #[test]
    fn empty_log_is_empty() {
        let out = parse("").unwrap();
        assert!(out.events.is_empty());
        assert_eq!(out.rows, 0);
    }

    #[test]
    fn mostly_garbage_is_rejected() {
        let err = parse("a\tb\tc\nu\ti\t1\nd\n").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn missing_file_is_io() {
        let err = parse_log(Path::new("/nonexistent/log.tsv"), &LogFormat::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn header_and_comma_layout() {
        let fmt = LogFormat {
            has_header: true,
            timestamp_column: 3,
            ..LogFormat::csv()
        };
        let out = parse_log_bytes(b"user,item,rating,ts\nu,i,5,7\n", &fmt, Path::new("m")).unwrap();
        assert_eq!(out.events[0].timestamp, 7);
    }
}
