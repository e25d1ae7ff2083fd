use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Event, EventSequence};
use crate::error::{Result, TppError};
use crate::scalar::Scalar;

#[derive(Serialize, Deserialize)]
struct RawEvent {
    t: f64,
    e: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    seq_id: String,
    horizon: [f64; 2],
    events: Vec<RawEvent>,
}

/// Reads one sequence per line. Blank lines are skipped.
pub fn load_sequences<T: Scalar>(path: impl AsRef<Path>, num_types: usize) -> Result<Vec<EventSequence<T>>> {
    parse_sequences(File::open(path)?, num_types)
}

pub fn parse_sequences<T: Scalar>(reader: impl Read, num_types: usize) -> Result<Vec<EventSequence<T>>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSequence =
            serde_json::from_str(&line).map_err(|e| TppError::Parse { line: n + 1, msg: e.to_string() })?;
        let events = raw.events.iter().map(|ev| Event::new(ev.e, T::of(ev.t))).collect();
        let seq = EventSequence::new(raw.seq_id, (T::of(raw.horizon[0]), T::of(raw.horizon[1])), events, num_types)?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequences<T: Scalar>(mut w: impl Write, seqs: &[EventSequence<T>]) -> Result<()> {
    for s in seqs {
        let raw = RawSequence {
            seq_id: s.seq_id.clone(),
            horizon: [s.horizon_start.f64(), s.horizon_end.f64()],
            events: s.events.iter().map(|e| RawEvent { t: e.time.f64(), e: e.type_id }).collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_sequences<T: Scalar>(path: impl AsRef<Path>, seqs: &[EventSequence<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sequences(&mut w, seqs)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line() {
        let src = r#"{"seq_id":"a","horizon":[0,10],"events":[{"t":1.0,"e":1},{"t":2.5,"e":2}]}"#;
        let seqs = parse_sequences::<f64>(src.as_bytes(), 2).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].seq_id, "a");
        assert_eq!(seqs[0].events, vec![Event::new(1, 1.0), Event::new(2, 2.5)]);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_sequences::<f64>("".as_bytes(), 3).unwrap().is_empty());
        assert!(parse_sequences::<f64>("\n\n".as_bytes(), 3).unwrap().is_empty());
    }

    #[test]
    fn rejects_non_increasing_and_bad_types() {
        let src = r#"{"seq_id":"bad","horizon":[0,10],"events":[{"t":2.0,"e":1},{"t":1.0,"e":1}]}"#;
        match parse_sequences::<f64>(src.as_bytes(), 2) {
            Err(TppError::Validation { seq_id, .. }) => assert_eq!(seq_id, "bad"),
            other => panic!("expected validation error, got {other:?}"),
        }
        let src = r#"{"seq_id":"t","horizon":[0,10],"events":[{"t":2.0,"e":5}]}"#;
        assert!(matches!(parse_sequences::<f64>(src.as_bytes(), 2), Err(TppError::Validation { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"seq_id":"a","horizon":[0,10],"events":[]}"#;
        let src = format!("{good}\n{{not json\n");
        match parse_sequences::<f64>(src.as_bytes(), 2) {
            Err(TppError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_parse_is_identity() {
        let s = EventSequence::new("q", (0.0, 7.5), vec![Event::new(2, 0.1 + 0.2), Event::new(1, 7.5)], 2).unwrap();
        let mut buf = Vec::new();
        write_sequences(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = parse_sequences::<f64>(buf.as_slice(), 2).unwrap();
        assert_eq!(back, vec![s]);
    }
}
