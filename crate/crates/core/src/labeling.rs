//! Live procedure labeling: a per-session state machine over station and
//! FNA events, the fold from events to station intervals, and (with the
//! `store` feature) an append-only JSON-lines store that survives restarts.
//!
//! Rules enforced while a session is live:
//! - at most one station is open; a second `station_start` is rejected,
//! - `station_stop` must name the open station and come strictly after its start,
//! - timestamps never decrease,
//! - finalized sessions reject every mutation.
//!
//! Times are seconds from session creation, kept at millisecond resolution so
//! that exported three-decimal CSV values are exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{labels_csv_string, Station, StationInterval};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelingError {
    #[error("{0}")]
    Validation(String),
    #[error("procedure {0} not found")]
    NotFound(String),
    /// The request is well formed but illegal in the session's current state.
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("storage error: {0}")]
    Storage(String),
}

impl LabelingError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            LabelingError::Validation(_) => "validation",
            LabelingError::NotFound(_) => "not_found",
            LabelingError::Conflict { code, .. } => code,
            LabelingError::Storage(_) => "storage",
        }
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        LabelingError::Conflict { code, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StationStart,
    StationStop,
    Fna,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Live,
    Finalized,
}

impl std::str::FromStr for SessionState {
    type Err = LabelingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(SessionState::Live),
            "finalized" => Ok(SessionState::Finalized),
            other => Err(LabelingError::Validation(format!("unknown state {other:?} (live, finalized)"))),
        }
    }
}

/// A recorded event with its assigned time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station: Option<Station>,
    pub t: f64,
}

/// An event as submitted; `t` is optional and defaults to server time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRequest {
    pub kind: EventKind,
    #[serde(default)]
    pub station: Option<Station>,
    #[serde(default)]
    pub t: Option<f64>,
}

/// Rounds to whole milliseconds.
pub fn quantize(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Folded result of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureRecord {
    pub id: String,
    pub patient_ref: String,
    pub intervals: Vec<StationInterval>,
    pub fna_times: Vec<f64>,
    pub session_duration: f64,
    /// Station that was still open at finalize and closed automatically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_closed: Option<Station>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Folds a legal event sequence into station intervals and FNA times,
/// closing a station still open at `end`. Zero-length auto-closed intervals
/// are dropped.
pub fn fold_events(events: &[LabelEvent], end: f64) -> (Vec<StationInterval>, Vec<f64>, Option<Station>) {
    let mut intervals = Vec::new();
    let mut fna = Vec::new();
    let mut open: Option<(Station, f64)> = None;
    for e in events {
        match e.kind {
            EventKind::StationStart => open = Some((e.station.expect("station event"), e.t)),
            EventKind::StationStop => {
                if let Some((station, t_start)) = open.take() {
                    intervals.push(StationInterval { station, t_start, t_end: e.t });
                }
            }
            EventKind::Fna => fna.push(e.t),
        }
    }
    let auto = open.map(|(station, t_start)| {
        if end > t_start {
            intervals.push(StationInterval { station, t_start, t_end: end });
        }
        station
    });
    (intervals, fna, auto)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSession {
    pub id: String,
    pub patient_ref: String,
    /// Unix seconds.
    pub created_at: f64,
    /// Creation order within a store.
    pub seq: u64,
    pub state: SessionState,
    pub events: Vec<LabelEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ProcedureRecord>,
}

impl ProcedureSession {
    pub fn new(id: String, patient_ref: &str, created_at: f64, seq: u64) -> Result<Self, LabelingError> {
        let patient_ref = patient_ref.trim();
        if patient_ref.is_empty() {
            return Err(LabelingError::Validation("patient_ref must not be empty".into()));
        }
        Ok(Self {
            id,
            patient_ref: patient_ref.to_string(),
            created_at,
            seq,
            state: SessionState::Live,
            events: Vec::new(),
            record: None,
        })
    }

    pub fn last_t(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    pub fn open_station(&self) -> Option<(Station, f64)> {
        let mut open = None;
        for e in &self.events {
            match e.kind {
                EventKind::StationStart => open = e.station.map(|s| (s, e.t)),
                EventKind::StationStop => open = None,
                EventKind::Fna => {}
            }
        }
        open
    }

    fn require_live(&self) -> Result<(), LabelingError> {
        match self.state {
            SessionState::Live => Ok(()),
            SessionState::Finalized => {
                Err(LabelingError::conflict("finalized", format!("procedure {} is finalized and immutable", self.id)))
            }
        }
    }

    /// Resolves the event time: the client value if given, otherwise
    /// `server_elapsed` raised to the last recorded time.
    fn resolve_t(&self, client: Option<f64>, server_elapsed: f64) -> Result<f64, LabelingError> {
        match client {
            Some(t) => {
                if !t.is_finite() || t < 0.0 {
                    return Err(LabelingError::Validation(format!("t must be a non-negative number, got {t}")));
                }
                let t = quantize(t);
                if t < self.last_t() {
                    return Err(LabelingError::Validation(format!(
                        "t = {t:.3} is before the previous event at {:.3}",
                        self.last_t()
                    )));
                }
                Ok(t)
            }
            None => Ok(quantize(server_elapsed.max(0.0)).max(self.last_t())),
        }
    }

    /// Validates an event against the state machine without recording it.
    pub fn check_event(&self, req: &EventRequest, server_elapsed: f64) -> Result<LabelEvent, LabelingError> {
        self.require_live()?;
        let t = self.resolve_t(req.t, server_elapsed)?;
        match (req.kind, req.station) {
            (EventKind::Fna, Some(_)) => {
                return Err(LabelingError::Validation("fna events do not take a station".into()));
            }
            (EventKind::StationStart | EventKind::StationStop, None) => {
                return Err(LabelingError::Validation("station events require a station".into()));
            }
            _ => {}
        }
        let open = self.open_station();
        match req.kind {
            EventKind::StationStart => {
                if let Some((s, _)) = open {
                    return Err(LabelingError::conflict(
                        "station_open",
                        format!("{s} is still open; stop it before starting another station"),
                    ));
                }
            }
            EventKind::StationStop => {
                let station = req.station.expect("checked above");
                match open {
                    None => {
                        return Err(LabelingError::conflict("no_open_station", format!("{station} is not open")));
                    }
                    Some((s, _)) if s != station => {
                        return Err(LabelingError::conflict(
                            "station_mismatch",
                            format!("{station} is not open ({s} is)"),
                        ));
                    }
                    Some((_, t_start)) if t <= t_start => {
                        return Err(LabelingError::Validation(format!(
                            "stop at {t:.3} must come after the start at {t_start:.3}"
                        )));
                    }
                    _ => {}
                }
            }
            EventKind::Fna => {}
        }
        Ok(LabelEvent { kind: req.kind, station: req.station, t })
    }

    pub fn record_event(&mut self, req: &EventRequest, server_elapsed: f64) -> Result<LabelEvent, LabelingError> {
        let e = self.check_event(req, server_elapsed)?;
        self.events.push(e);
        Ok(e)
    }

    /// Validates a finalize request and returns the end time.
    pub fn check_finalize(&self, client_t: Option<f64>, server_elapsed: f64) -> Result<f64, LabelingError> {
        self.require_live()?;
        self.resolve_t(client_t, server_elapsed)
    }

    pub fn finalize(&mut self, client_t: Option<f64>, server_elapsed: f64) -> Result<ProcedureRecord, LabelingError> {
        let end = self.check_finalize(client_t, server_elapsed)?;
        Ok(self.apply_finalize(end))
    }

    fn apply_finalize(&mut self, end: f64) -> ProcedureRecord {
        let (intervals, fna_times, auto_closed) = fold_events(&self.events, end);
        let warnings = auto_closed
            .map(|s| vec![format!("{s} was still open at finalize and was closed at {end:.3}")])
            .unwrap_or_default();
        let record = ProcedureRecord {
            id: self.id.clone(),
            patient_ref: self.patient_ref.clone(),
            intervals,
            fna_times,
            session_duration: end,
            auto_closed,
            warnings,
        };
        self.state = SessionState::Finalized;
        self.record = Some(record.clone());
        record
    }

    pub fn summary(&self) -> ProcedureSummary {
        let count = |k| self.events.iter().filter(|e| e.kind == k).count();
        ProcedureSummary {
            id: self.id.clone(),
            patient_ref: self.patient_ref.clone(),
            state: self.state,
            created_at: self.created_at,
            events: self.events.len(),
            station_events: count(EventKind::StationStart) + count(EventKind::StationStop),
            fna_events: count(EventKind::Fna),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSummary {
    pub id: String,
    pub patient_ref: String,
    pub state: SessionState,
    pub created_at: f64,
    pub events: usize,
    pub station_events: usize,
    pub fna_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = LabelingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(LabelingError::Validation(format!("unknown export format {other:?} (csv, json)"))),
        }
    }
}

/// `labels.csv` content for the record.
pub fn export_csv(record: &ProcedureRecord) -> String {
    labels_csv_string(&record.intervals)
}

pub fn export_json(record: &ProcedureRecord) -> String {
    let mut s = serde_json::to_string_pretty(record).expect("record serializes");
    s.push('\n');
    s
}

#[cfg(feature = "store")]
pub use store::{Clock, Store, SystemClock};

#[cfg(feature = "store")]
mod store {
    use std::collections::HashMap;
    use std::fs::{self, File, OpenOptions};
    use std::io::{BufRead, BufReader, Write};
    use std::path::{Path, PathBuf};

    use serde::{Deserialize, Serialize};

    use super::*;

    /// Wall-clock source in Unix seconds.
    pub trait Clock: Send + Sync {
        fn now(&self) -> f64;
    }

    #[derive(Debug, Default, Clone, Copy)]
    pub struct SystemClock;

    impl Clock for SystemClock {
        fn now(&self) -> f64 {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
        }
    }

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    enum LogLine {
        Header { id: String, patient_ref: String, created_at: f64, seq: u64 },
        Event(LabelEvent),
        Finalize { t: f64 },
    }

    fn storage(path: &Path, e: impl std::fmt::Display) -> LabelingError {
        LabelingError::Storage(format!("{}: {e}", path.display()))
    }

    /// Sessions persisted as one `<id>.jsonl` log each. Every mutation is
    /// appended and synced to disk before it is applied in memory.
    pub struct Store {
        root: PathBuf,
        clock: Box<dyn Clock>,
        sessions: HashMap<String, ProcedureSession>,
        next_seq: u64,
    }

    impl Store {
        /// Opens `root`, creating it if needed, and replays existing logs.
        pub fn open(root: impl AsRef<Path>) -> Result<Self, LabelingError> {
            Self::with_clock(root, Box::new(SystemClock))
        }

        pub fn with_clock(root: impl AsRef<Path>, clock: Box<dyn Clock>) -> Result<Self, LabelingError> {
            let root = root.as_ref().to_path_buf();
            fs::create_dir_all(&root).map_err(|e| storage(&root, e))?;
            let mut sessions = HashMap::new();
            let mut paths: Vec<PathBuf> = fs::read_dir(&root)
                .map_err(|e| storage(&root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            for path in paths {
                let s = replay(&path)?;
                sessions.insert(s.id.clone(), s);
            }
            let next_seq = sessions.values().map(|s| s.seq + 1).max().unwrap_or(0);
            Ok(Self { root, clock, sessions, next_seq })
        }

        pub fn root(&self) -> &Path {
            &self.root
        }

        fn path_of(&self, id: &str) -> PathBuf {
            self.root.join(format!("{id}.jsonl"))
        }

        fn append(&self, id: &str, line: &LogLine, create: bool) -> Result<(), LabelingError> {
            let path = self.path_of(id);
            let mut f =
                OpenOptions::new().append(true).create_new(create).open(&path).map_err(|e| storage(&path, e))?;
            let mut buf = serde_json::to_vec(line).expect("log line serializes");
            buf.push(b'\n');
            f.write_all(&buf).map_err(|e| storage(&path, e))?;
            f.sync_data().map_err(|e| storage(&path, e))?;
            if create {
                File::open(&self.root).and_then(|d| d.sync_all()).ok();
            }
            Ok(())
        }

        pub fn get(&self, id: &str) -> Result<&ProcedureSession, LabelingError> {
            self.sessions.get(id).ok_or_else(|| LabelingError::NotFound(id.to_string()))
        }

        fn elapsed(&self, s: &ProcedureSession) -> f64 {
            self.clock.now() - s.created_at
        }

        pub fn create(&mut self, patient_ref: &str) -> Result<ProcedureSession, LabelingError> {
            let id = new_id()?;
            let session = ProcedureSession::new(id.clone(), patient_ref, self.clock.now(), self.next_seq)?;
            let header = LogLine::Header {
                id: id.clone(),
                patient_ref: session.patient_ref.clone(),
                created_at: session.created_at,
                seq: session.seq,
            };
            self.append(&id, &header, true)?;
            self.next_seq += 1;
            self.sessions.insert(id, session.clone());
            Ok(session)
        }

        pub fn record_event(&mut self, id: &str, req: &EventRequest) -> Result<LabelEvent, LabelingError> {
            let s = self.get(id)?;
            let event = s.check_event(req, self.elapsed(s))?;
            self.append(id, &LogLine::Event(event), false)?;
            self.sessions.get_mut(id).expect("checked").events.push(event);
            Ok(event)
        }

        pub fn finalize(&mut self, id: &str, client_t: Option<f64>) -> Result<ProcedureRecord, LabelingError> {
            let s = self.get(id)?;
            let end = s.check_finalize(client_t, self.elapsed(s))?;
            self.append(id, &LogLine::Finalize { t: end }, false)?;
            Ok(self.sessions.get_mut(id).expect("checked").apply_finalize(end))
        }

        /// The finalized record.
        pub fn record(&self, id: &str) -> Result<&ProcedureRecord, LabelingError> {
            let s = self.get(id)?;
            s.record.as_ref().ok_or_else(|| {
                LabelingError::conflict("not_finalized", format!("procedure {id} must be finalized before export"))
            })
        }

        pub fn export(&self, id: &str, format: ExportFormat) -> Result<String, LabelingError> {
            let r = self.record(id)?;
            Ok(match format {
                ExportFormat::Csv => export_csv(r),
                ExportFormat::Json => export_json(r),
            })
        }

        /// Summaries in creation order, optionally restricted to one state.
        pub fn list(&self, state: Option<SessionState>) -> Vec<ProcedureSummary> {
            let mut v: Vec<&ProcedureSession> =
                self.sessions.values().filter(|s| state.is_none_or(|st| s.state == st)).collect();
            v.sort_by_key(|s| s.seq);
            v.into_iter().map(|s| s.summary()).collect()
        }
    }

    /// Rebuilds a session from its log. A trailing line without a newline
    /// was never acknowledged and is ignored.
    fn replay(path: &Path) -> Result<ProcedureSession, LabelingError> {
        let f = File::open(path).map_err(|e| storage(path, e))?;
        let mut reader = BufReader::new(f);
        let mut session: Option<ProcedureSession> = None;
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| storage(path, e))?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            lineno += 1;
            let parsed: LogLine =
                serde_json::from_str(&line).map_err(|e| storage(path, format!("line {lineno}: {e}")))?;
            match (parsed, session.as_mut()) {
                (LogLine::Header { id, patient_ref, created_at, seq }, None) => {
                    session = Some(ProcedureSession::new(id, &patient_ref, created_at, seq)?);
                }
                (LogLine::Event(e), Some(s)) => {
                    let req = EventRequest { kind: e.kind, station: e.station, t: Some(e.t) };
                    s.record_event(&req, 0.0).map_err(|err| storage(path, format!("line {lineno}: {err}")))?;
                }
                (LogLine::Finalize { t }, Some(s)) => {
                    s.finalize(Some(t), 0.0).map_err(|err| storage(path, format!("line {lineno}: {err}")))?;
                }
                _ => return Err(storage(path, format!("line {lineno}: unexpected record"))),
            }
        }
        session.ok_or_else(|| storage(path, "missing header"))
    }

    /// 128 random bits from the operating system, hex encoded.
    fn new_id() -> Result<String, LabelingError> {
        let mut b = [0u8; 16];
        getrandom::fill(&mut b).map_err(|e| LabelingError::Storage(format!("random id: {e}")))?;
        Ok(hex::encode(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, station: Option<Station>, t: f64) -> EventRequest {
        EventRequest { kind, station, t: Some(t) }
    }

    fn session() -> ProcedureSession {
        ProcedureSession::new("a".into(), "P-001", 0.0, 0).unwrap()
    }

    use EventKind::*;
    use Station::*;

    #[test]
    fn create_rules() {
        let s = session();
        assert_eq!(s.state, SessionState::Live);
        assert!(s.events.is_empty());
        assert!(matches!(ProcedureSession::new("b".into(), "  ", 0.0, 0), Err(LabelingError::Validation(_))));
    }

    #[test]
    fn start_stop_gives_one_interval() {
        let mut s = session();
        s.record_event(&ev(StationStart, Some(Station1), 10.0), 0.0).unwrap();
        s.record_event(&ev(Fna, None, 50.0), 0.0).unwrap();
        s.record_event(&ev(StationStop, Some(Station1), 95.0), 0.0).unwrap();
        let r = s.finalize(Some(100.0), 0.0).unwrap();
        assert_eq!(r.intervals, vec![StationInterval { station: Station1, t_start: 10.0, t_end: 95.0 }]);
        assert_eq!(r.fna_times, vec![50.0]);
        assert_eq!(r.auto_closed, None);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn illegal_events() {
        let mut s = session();
        let e = s.record_event(&ev(StationStop, Some(Station1), 1.0), 0.0).unwrap_err();
        assert_eq!(e.code(), "no_open_station");
        s.record_event(&ev(StationStart, Some(Station1), 2.0), 0.0).unwrap();
        assert_eq!(s.record_event(&ev(StationStart, Some(Station2), 3.0), 0.0).unwrap_err().code(), "station_open");
        assert_eq!(s.record_event(&ev(StationStop, Some(Station2), 3.0), 0.0).unwrap_err().code(), "station_mismatch");
        assert_eq!(s.record_event(&ev(StationStop, Some(Station1), 2.0), 0.0).unwrap_err().code(), "validation");
        assert_eq!(s.record_event(&ev(Fna, None, 1.0), 0.0).unwrap_err().code(), "validation");
        assert_eq!(s.record_event(&ev(Fna, Some(Station1), 4.0), 0.0).unwrap_err().code(), "validation");
        assert_eq!(s.record_event(&ev(StationStart, None, 4.0), 0.0).unwrap_err().code(), "validation");
        assert_eq!(s.events.len(), 1);
        s.finalize(None, 10.0).unwrap();
        assert_eq!(s.record_event(&ev(Fna, None, 20.0), 0.0).unwrap_err().code(), "finalized");
        assert_eq!(s.finalize(None, 30.0).unwrap_err().code(), "finalized");
    }

    #[test]
    fn fold_example() {
        let mut s = session();
        for (k, st, t) in [
            (StationStart, Station1, 0.0),
            (StationStop, Station1, 30.0),
            (StationStart, Station2, 40.0),
            (StationStop, Station2, 90.0),
        ] {
            s.record_event(&ev(k, Some(st), t), 0.0).unwrap();
        }
        let r = s.finalize(None, 95.0).unwrap();
        assert_eq!(
            r.intervals,
            vec![
                StationInterval { station: Station1, t_start: 0.0, t_end: 30.0 },
                StationInterval { station: Station2, t_start: 40.0, t_end: 90.0 }
            ]
        );
        assert_eq!(r.session_duration, 95.0);
    }

    #[test]
    fn auto_close_on_finalize() {
        let mut s = session();
        s.record_event(&ev(StationStart, Some(Station3), 100.0), 0.0).unwrap();
        let r = s.finalize(Some(120.0), 0.0).unwrap();
        assert_eq!(r.intervals, vec![StationInterval { station: Station3, t_start: 100.0, t_end: 120.0 }]);
        assert_eq!(r.auto_closed, Some(Station3));
        assert_eq!(r.warnings.len(), 1);
        let mut s = session();
        s.record_event(&ev(StationStart, Some(Station3), 5.0), 0.0).unwrap();
        let r = s.finalize(Some(5.0), 0.0).unwrap();
        assert!(r.intervals.is_empty());
        assert_eq!(r.auto_closed, Some(Station3));
    }

    #[test]
    fn empty_record_and_csv() {
        let mut s = session();
        let r = s.finalize(None, 12.0).unwrap();
        assert!(r.intervals.is_empty() && r.fna_times.is_empty());
        assert_eq!(export_csv(&r), "station,t_start,t_end\n");
        let mut s = session();
        s.record_event(&ev(StationStart, Some(Station1), 0.0), 0.0).unwrap();
        s.record_event(&ev(StationStop, Some(Station1), 30.0), 0.0).unwrap();
        let r = s.finalize(None, 31.0).unwrap();
        assert_eq!(export_csv(&r), "station,t_start,t_end\nStation1,0.000,30.000\n");
        let json: serde_json::Value = serde_json::from_str(&export_json(&r)).unwrap();
        assert!(json["fna_times"].is_array());
    }

    #[test]
    fn server_time_is_monotonic_and_quantized() {
        let mut s = session();
        let a = s.record_event(&EventRequest { kind: Fna, station: None, t: None }, 5.0004).unwrap();
        assert_eq!(a.t, 5.0);
        // a clock step backwards is clamped to the previous time
        let b = s.record_event(&EventRequest { kind: Fna, station: None, t: None }, 3.0).unwrap();
        assert_eq!(b.t, 5.0);
        assert!(s.record_event(&ev(Fna, None, f64::NAN), 0.0).is_err());
        assert!(s.record_event(&ev(Fna, None, -1.0), 0.0).is_err());
    }

    #[test]
    fn wire_format() {
        let r: EventRequest = serde_json::from_str(r#"{"kind":"station_start","station":"Station2"}"#).unwrap();
        assert_eq!(r, EventRequest { kind: StationStart, station: Some(Station2), t: None });
        assert!(serde_json::from_str::<EventRequest>(r#"{"kind":"pause"}"#).is_err());
        assert_eq!("finalized".parse::<SessionState>().unwrap(), SessionState::Finalized);
        assert_eq!("csv".parse::<ExportFormat>().unwrap(), ExportFormat::Csv);
    }
}
