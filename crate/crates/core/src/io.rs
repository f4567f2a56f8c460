//! Wire formats: observation JSON Lines in, streamed JSON reports out.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::landmark::LandmarkObservation;

/// One camera frame of landmark detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordWire", into = "RecordWire")]
pub struct ObservationRecord {
    pub t: f64,
    pub landmarks: Vec<LandmarkObservation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkWire {
    id: u8,
    pos: [f64; 3],
    vis: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    t: f64,
    landmarks: Vec<LandmarkWire>,
}

impl TryFrom<RecordWire> for ObservationRecord {
    type Error = String;

    fn try_from(w: RecordWire) -> std::result::Result<Self, String> {
        if !w.t.is_finite() {
            return Err("t must be finite".into());
        }
        let mut seen = BTreeSet::new();
        let mut landmarks = Vec::with_capacity(w.landmarks.len());
        for l in w.landmarks {
            if !seen.insert(l.id) {
                return Err(format!("duplicate landmark id {}", l.id));
            }
            landmarks.push(LandmarkObservation { t: w.t, id: l.id, pos: Vector3::from(l.pos), vis: l.vis });
        }
        Ok(ObservationRecord { t: w.t, landmarks })
    }
}

impl From<ObservationRecord> for RecordWire {
    fn from(r: ObservationRecord) -> Self {
        RecordWire {
            t: r.t,
            landmarks: r.landmarks.into_iter().map(|l| LandmarkWire { id: l.id, pos: l.pos.into(), vis: l.vis }).collect(),
        }
    }
}

/// Streams records from JSON Lines, one record per line. Blank lines are
/// skipped; timestamps must not decrease.
pub struct ObservationReader<R> {
    input: R,
    line: usize,
    last_t: Option<f64>,
    buf: String,
}

impl<R: BufRead> ObservationReader<R> {
    pub fn new(input: R) -> Self {
        Self { input, line: 0, last_t: None, buf: String::new() }
    }

    /// Line number of the most recently read record.
    pub fn line(&self) -> usize {
        self.line
    }
}

impl<R: BufRead> Iterator for ObservationReader<R> {
    type Item = Result<ObservationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => self.line += 1,
                Err(e) => return Some(Err(e.into())),
            }
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedRecord { line: self.line, reason };
            let record: ObservationRecord = match serde_json::from_str(text) {
                Ok(r) => r,
                Err(e) => return Some(Err(malformed(e.to_string()))),
            };
            if let Some(prev) = self.last_t {
                if record.t < prev {
                    return Some(Err(malformed(format!("t = {} precedes previous t = {prev}", record.t))));
                }
            }
            self.last_t = Some(record.t);
            return Some(Ok(record));
        }
    }
}

pub fn write_records<W: Write>(mut out: W, records: &[ObservationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a JSON object whose `per_frame` array is emitted incrementally,
/// followed by the summary fields once the stream ends.
pub struct ReportWriter<W: Write> {
    out: W,
    frames: usize,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(b"{\"per_frame\":[")?;
        Ok(Self { out, frames: 0 })
    }

    pub fn frame<T: Serialize>(&mut self, belief: &T) -> Result<()> {
        self.out.write_all(if self.frames == 0 { b"\n" } else { b",\n" })?;
        serde_json::to_writer(&mut self.out, belief)?;
        self.frames += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    /// `summary` must serialize to a JSON object; its fields follow
    /// `per_frame` in the output.
    pub fn finish<T: Serialize>(mut self, summary: &T) -> Result<W> {
        let value = serde_json::to_value(summary)?;
        let map = value.as_object().ok_or_else(|| Error::Degenerate("report summary is not an object".into()))?;
        self.out.write_all(b"\n]")?;
        for (k, v) in map {
            self.out.write_all(b",\n")?;
            serde_json::to_writer(&mut self.out, k)?;
            self.out.write_all(b":")?;
            serde_json::to_writer(&mut self.out, v)?;
        }
        self.out.write_all(b"\n}\n")?;
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn reads_records_and_reports_bad_lines() {
        let text = "{\"t\":0.0,\"landmarks\":[{\"id\":3,\"pos\":[0.1,0.2,0.3],\"vis\":0.9}]}\n\n{\"t\":0.1,\"landmarks\":[]}\n{\"t\":0.05,\"landmarks\":[]}\n";
        let mut reader = ObservationReader::new(Cursor::new(text));
        let first = reader.next().unwrap().unwrap();
        assert_eq!(first.landmarks[0].id, 3);
        assert_eq!(first.landmarks[0].pos, Vector3::new(0.1, 0.2, 0.3));
        assert!(reader.next().unwrap().is_ok());
        match reader.next().unwrap() {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_garbage() {
        let dup = "{\"t\":0,\"landmarks\":[{\"id\":1,\"pos\":[0,0,0],\"vis\":1},{\"id\":1,\"pos\":[0,0,0],\"vis\":1}]}\n";
        assert!(matches!(ObservationReader::new(Cursor::new(dup)).next(), Some(Err(Error::MalformedRecord { line: 1, .. }))));
        assert!(matches!(ObservationReader::new(Cursor::new("not json\n")).next(), Some(Err(Error::MalformedRecord { line: 1, .. }))));
        assert!(ObservationReader::new(Cursor::new("")).next().is_none());
    }

    #[test]
    fn records_round_trip() {
        let rec = ObservationRecord {
            t: 1.5,
            landmarks: vec![LandmarkObservation { t: 1.5, id: 7, pos: Vector3::new(0.25, -1.0, 3.0), vis: 0.5 }],
        };
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back: Vec<_> = ObservationReader::new(Cursor::new(buf)).collect::<Result<_>>().unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn streamed_report_is_valid_json() {
        let mut w = ReportWriter::new(Vec::new()).unwrap();
        w.frame(&serde_json::json!({"t": 0.0})).unwrap();
        w.frame(&serde_json::json!({"t": 0.1})).unwrap();
        let out = w.finish(&serde_json::json!({"joint_type": "rigid", "q_max": 0.0})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["per_frame"].as_array().unwrap().len(), 2);
        assert_eq!(v["joint_type"], "rigid");

        let empty = ReportWriter::new(Vec::new()).unwrap().finish(&serde_json::json!({})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&empty).unwrap();
        assert!(v["per_frame"].as_array().unwrap().is_empty());
    }
}
