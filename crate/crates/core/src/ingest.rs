//! Session-log ingestion and provider prefiltering.
//!
//! Logs are produced by whatever capture tool isolates TLS sessions; each
//! line carries the total bytes of one session and the timestamp of its
//! first packet. Two interchange formats are supported:
//!
//! * JSONL: `{"loc_id": "1", "bytes": 35780, "ts": 1399743000, "peer": "172.217.4.10"}`
//!   with `loc_id` and `peer` optional.
//! * CSV: header `loc_id,bytes,timestamp,peer_net`, empty fields for absent
//!   values.
//!
//! Fractional timestamps are truncated to whole seconds.

use std::io::{Read, Write};
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::error::{Error, Result};
use crate::loc::LocId;

pub const CSV_HEADER: [&str; 4] = ["loc_id", "bytes", "timestamp", "peer_net"];

/// One observed TLS/SSL session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    /// Present for knowledge-base probes, absent for user observations.
    pub loc_id: Option<LocId>,
    pub bytes: u64,
    /// Epoch seconds of the session's first packet.
    pub timestamp: u64,
    /// Provider-side address or prefix, used by [`prefilter`].
    pub peer_net: Option<String>,
}

impl SessionRecord {
    pub fn labeled(loc_id: LocId, bytes: u64, timestamp: u64) -> Self {
        SessionRecord {
            loc_id: Some(loc_id),
            bytes,
            timestamp,
            peer_net: None,
        }
    }

    pub fn unlabeled(bytes: u64, timestamp: u64) -> Self {
        SessionRecord {
            loc_id: None,
            bytes,
            timestamp,
            peer_net: None,
        }
    }

    pub fn with_peer(mut self, peer: impl Into<String>) -> Self {
        self.peer_net = Some(peer.into());
        self
    }

    /// Normalized JSONL line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        let line = JsonLine {
            loc_id: self.loc_id.as_ref().map(|l| l.as_str().to_owned()),
            bytes: Number::from(self.bytes),
            ts: Number::from(self.timestamp),
            peer: self.peer_net.clone(),
        };
        serde_json::to_string(&line).expect("record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            _ => Err(Error::UnknownFormat(s.to_owned())),
        }
    }
}

/// A recoverable problem with one input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    /// 1-based line number in the input.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub records: Vec<SessionRecord>,
    pub errors: Vec<LineError>,
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loc_id: Option<String>,
    bytes: Number,
    ts: Number,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    peer: Option<String>,
}

fn parse_bytes_number(n: &Number) -> std::result::Result<u64, String> {
    match n.as_u64() {
        Some(0) => Err("bytes must be at least 1".into()),
        Some(b) => Ok(b),
        None => Err(format!("bytes must be a positive integer, got {n}")),
    }
}

fn parse_ts_number(n: &Number) -> std::result::Result<u64, String> {
    if let Some(ts) = n.as_u64() {
        return Ok(ts);
    }
    match n.as_f64() {
        Some(f) if f >= 0.0 && f.is_finite() && f < u64::MAX as f64 => Ok(f.trunc() as u64),
        _ => Err(format!("timestamp must be a nonnegative number, got {n}")),
    }
}

fn parse_bytes_field(s: &str) -> std::result::Result<u64, String> {
    match s.trim().parse::<u64>() {
        Ok(0) => Err("bytes must be at least 1".into()),
        Ok(b) => Ok(b),
        Err(_) => Err(format!("bytes must be a positive integer, got {s:?}")),
    }
}

fn parse_ts_field(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    if let Ok(ts) = s.parse::<u64>() {
        return Ok(ts);
    }
    match s.parse::<f64>() {
        Ok(f) if f >= 0.0 && f.is_finite() && f < u64::MAX as f64 => Ok(f.trunc() as u64),
        _ => Err(format!("timestamp must be a nonnegative number, got {s:?}")),
    }
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.is_empty())
}

fn parse_json_line(line: &str) -> std::result::Result<SessionRecord, String> {
    let raw: JsonLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(SessionRecord {
        loc_id: non_empty(raw.loc_id).map(LocId::from),
        bytes: parse_bytes_number(&raw.bytes)?,
        timestamp: parse_ts_number(&raw.ts)?,
        peer_net: non_empty(raw.peer),
    })
}

fn parse_jsonl(text: &str) -> ParsedLog {
    let mut out = ParsedLog::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_json_line(line) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError {
                line: i as u64 + 1,
                message,
            }),
        }
    }
    out
}

fn parse_csv_row(row: &csv::StringRecord) -> std::result::Result<SessionRecord, String> {
    if row.len() != CSV_HEADER.len() {
        return Err(format!("expected {} fields, got {}", CSV_HEADER.len(), row.len()));
    }
    Ok(SessionRecord {
        loc_id: non_empty(Some(row[0].to_owned())).map(LocId::from),
        bytes: parse_bytes_field(&row[1])?,
        timestamp: parse_ts_field(&row[2])?,
        peer_net: non_empty(Some(row[3].trim().to_owned())),
    })
}

fn parse_csv(text: &str) -> Result<ParsedLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(Error::BadCsvHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = ParsedLog::default();
    for row in reader.records() {
        match row {
            Ok(row) => {
                let line = row.position().map_or(0, |p| p.line());
                match parse_csv_row(&row) {
                    Ok(r) => out.records.push(r),
                    Err(message) => out.errors.push(LineError { line, message }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.errors.push(LineError {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Parses a session log. Malformed lines are collected in
/// [`ParsedLog::errors`] rather than aborting; records keep input order.
pub fn parse_session_log(mut input: impl Read, format: LogFormat) -> Result<ParsedLog> {
    let mut raw = Vec::new();
    input
        .read_to_end(&mut raw)
        .map_err(|e| Error::io("<input>", e))?;
    let text = String::from_utf8(raw).map_err(|_| Error::InvalidUtf8)?;
    match format {
        LogFormat::Jsonl => Ok(parse_jsonl(&text)),
        LogFormat::Csv => parse_csv(&text),
    }
}

pub fn write_jsonl<'a>(
    records: impl IntoIterator<Item = &'a SessionRecord>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn write_csv<'a>(
    records: impl IntoIterator<Item = &'a SessionRecord>,
    out: impl Write,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for r in records {
        let bytes = r.bytes.to_string();
        let ts = r.timestamp.to_string();
        writer.write_record([
            r.loc_id.as_ref().map_or("", LocId::as_str),
            &bytes,
            &ts,
            r.peer_net.as_deref().unwrap_or(""),
        ])?;
    }
    writer.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

/// Network prefixes belonging to the location-based-service provider.
#[derive(Debug, Clone)]
pub struct ProviderFilter {
    allowed: Vec<IpNet>,
}

impl ProviderFilter {
    pub fn new<S: AsRef<str>>(prefixes: &[S]) -> Result<Self> {
        if prefixes.is_empty() {
            return Err(Error::EmptyFilter);
        }
        let allowed = prefixes
            .iter()
            .map(|p| {
                let p = p.as_ref().trim();
                p.parse::<IpNet>()
                    .map_err(|_| Error::InvalidPrefix(p.to_owned()))
            })
            .collect::<Result<_>>()?;
        Ok(ProviderFilter { allowed })
    }

    /// Whether `peer` (an address or a prefix) lies inside an allowed
    /// prefix. `None` if `peer` does not parse.
    pub fn admits(&self, peer: &str) -> Option<bool> {
        let peer = peer.trim();
        let net = match peer.parse::<IpNet>() {
            Ok(net) => net,
            Err(_) => IpNet::from(peer.parse::<IpAddr>().ok()?),
        };
        Some(self.allowed.iter().any(|a| a.contains(&net)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PrefilterReport {
    pub kept: usize,
    pub dropped_no_match: usize,
    pub dropped_missing_peer: usize,
    pub dropped_invalid_peer: usize,
}

impl PrefilterReport {
    pub fn dropped(&self) -> usize {
        self.dropped_no_match + self.dropped_missing_peer + self.dropped_invalid_peer
    }
}

/// Keeps only sessions exchanged with the provider, in input order.
pub fn prefilter(
    records: impl IntoIterator<Item = SessionRecord>,
    filter: &ProviderFilter,
) -> (Vec<SessionRecord>, PrefilterReport) {
    let mut report = PrefilterReport::default();
    let kept = records
        .into_iter()
        .filter(|r| {
            let Some(peer) = r.peer_net.as_deref() else {
                report.dropped_missing_peer += 1;
                return false;
            };
            match filter.admits(peer) {
                Some(true) => true,
                Some(false) => {
                    report.dropped_no_match += 1;
                    false
                }
                None => {
                    report.dropped_invalid_peer += 1;
                    false
                }
            }
        })
        .collect::<Vec<_>>();
    report.kept = kept.len();
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn jsonl(text: &str) -> ParsedLog {
        parse_session_log(text.as_bytes(), LogFormat::Jsonl).unwrap()
    }

    #[test]
    fn parses_knowledge_base_row() {
        let log = jsonl(r#"{"loc_id":"1","bytes":35780,"ts":1399743000}"#);
        assert!(log.errors.is_empty());
        assert_eq!(
            log.records,
            vec![SessionRecord::labeled(LocId::new("1"), 35_780, 1_399_743_000)]
        );
    }

    #[test]
    fn parses_minimum_unlabeled_record() {
        let log = jsonl(r#"{"bytes":80,"ts":0}"#);
        assert_eq!(log.records, vec![SessionRecord::unlabeled(80, 0)]);
    }

    #[test]
    fn zero_bytes_is_line_error() {
        let log = jsonl("{\"bytes\":10,\"ts\":1}\n{\"bytes\":0,\"ts\":5}\n{\"bytes\":11,\"ts\":2}\n");
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.errors.len(), 1);
        assert_eq!(log.errors[0].line, 2);
        assert!(log.errors[0].message.contains("at least 1"));
    }

    #[test]
    fn malformed_lines_collected_with_numbers() {
        let log = jsonl("not json\n\n{\"bytes\":1.5,\"ts\":3}\n{\"bytes\":5,\"ts\":-1}\n{\"bytes\":7,\"ts\":9.9}\n");
        let lines: Vec<u64> = log.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 3, 4]);
        assert_eq!(log.records, vec![SessionRecord::unlabeled(7, 9)]);
    }

    #[test]
    fn unknown_format_is_fatal() {
        assert!(matches!("pcap".parse::<LogFormat>(), Err(Error::UnknownFormat(_))));
        assert_eq!("CSV".parse::<LogFormat>().unwrap(), LogFormat::Csv);
    }

    #[test]
    fn invalid_utf8_is_fatal() {
        let raw: &[u8] = &[0x7b, 0xff, 0xfe, 0x7d];
        assert!(matches!(
            parse_session_log(raw, LogFormat::Jsonl),
            Err(Error::InvalidUtf8)
        ));
    }

    #[test]
    fn csv_with_quoting_and_empty_fields() {
        let text = "loc_id,bytes,timestamp,peer_net\n\
                    \"1\",35780,1399743000,172.217.4.10\n\
                    ,30784,1399743080,\n\
                    \"a,b\",12,3.7,\n\
                    2,0,5,\n";
        let log = parse_session_log(text.as_bytes(), LogFormat::Csv).unwrap();
        assert_eq!(log.records.len(), 3);
        assert_eq!(
            log.records[0],
            SessionRecord::labeled(LocId::new("1"), 35_780, 1_399_743_000).with_peer("172.217.4.10")
        );
        assert_eq!(log.records[1], SessionRecord::unlabeled(30_784, 1_399_743_080));
        assert_eq!(log.records[2].loc_id, Some(LocId::new("a,b")));
        assert_eq!(log.records[2].timestamp, 3);
        assert_eq!(log.errors.len(), 1);
        assert_eq!(log.errors[0].line, 5);
    }

    #[test]
    fn csv_header_required() {
        let text = "1,35780,1399743000,\n";
        assert!(matches!(
            parse_session_log(text.as_bytes(), LogFormat::Csv),
            Err(Error::BadCsvHeader(_))
        ));
    }

    #[test]
    fn prefilter_containment() {
        let filter = ProviderFilter::new(&["172.217.0.0/16"]).unwrap();
        assert_eq!(filter.admits("172.217.4.10"), Some(true));
        assert_eq!(filter.admits("10.0.0.1"), Some(false));
        assert_eq!(filter.admits("172.217.4.0/24"), Some(true));
        assert_eq!(filter.admits("172.0.0.0/8"), Some(false));
        assert_eq!(filter.admits("nonsense"), None);
    }

    #[test]
    fn filter_rejects_bad_prefixes() {
        assert!(matches!(
            ProviderFilter::new::<&str>(&[]),
            Err(Error::EmptyFilter)
        ));
        assert!(matches!(
            ProviderFilter::new(&["172.217.0.0/33"]),
            Err(Error::InvalidPrefix(_))
        ));
    }

    #[test]
    fn prefilter_counts_drops() {
        let filter = ProviderFilter::new(&["172.217.0.0/16", "2a00:1450::/32"]).unwrap();
        let records = vec![
            SessionRecord::unlabeled(1, 1).with_peer("172.217.1.1"),
            SessionRecord::unlabeled(2, 2),
            SessionRecord::unlabeled(3, 3).with_peer("10.0.0.1"),
            SessionRecord::unlabeled(4, 4).with_peer("2a00:1450:4001::5"),
            SessionRecord::unlabeled(5, 5).with_peer("garbage"),
        ];
        let (kept, report) = prefilter(records, &filter);
        assert_eq!(kept.iter().map(|r| r.bytes).collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(report.kept, 2);
        assert_eq!(report.dropped_missing_peer, 1);
        assert_eq!(report.dropped_no_match, 1);
        assert_eq!(report.dropped_invalid_peer, 1);
        assert_eq!(report.dropped(), 3);
    }

    fn arb_record() -> impl Strategy<Value = SessionRecord> {
        (
            proptest::option::of("[a-z0-9_\",]{1,6}"),
            1u64..10_000_000,
            0u64..4_000_000_000,
            proptest::option::of((0u8..=255, 0u8..=255, 0u8..=255, 0u8..=255)),
        )
            .prop_map(|(loc, bytes, ts, peer)| SessionRecord {
                loc_id: loc.map(LocId::from),
                bytes,
                timestamp: ts,
                peer_net: peer.map(|(a, b, c, d)| format!("{a}.{b}.{c}.{d}")),
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let mut buf = Vec::new();
            write_jsonl(&records, &mut buf).unwrap();
            let parsed = parse_session_log(buf.as_slice(), LogFormat::Jsonl).unwrap();
            prop_assert!(parsed.errors.is_empty());
            prop_assert_eq!(&parsed.records, &records);
            let mut again = Vec::new();
            write_jsonl(&parsed.records, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn csv_round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let mut buf = Vec::new();
            write_csv(&records, &mut buf).unwrap();
            let parsed = parse_session_log(buf.as_slice(), LogFormat::Csv).unwrap();
            prop_assert!(parsed.errors.is_empty());
            prop_assert_eq!(parsed.records, records);
        }

        #[test]
        fn prefilter_idempotent(records in proptest::collection::vec(arb_record(), 0..60)) {
            let filter = ProviderFilter::new(&["0.0.0.0/2", "200.0.0.0/8"]).unwrap();
            let (once, _) = prefilter(records.clone(), &filter);
            let (twice, report) = prefilter(once.clone(), &filter);
            prop_assert_eq!(report.dropped(), 0);
            prop_assert_eq!(&twice, &once);
            // order preserved: kept records form a subsequence of the input
            let mut it = records.iter();
            prop_assert!(once.iter().all(|r| it.any(|x| x == r)));
        }
    }
}
