//! Newline-delimited JSON framing for evaluator messages.
//!
//! One UTF-8 JSON document per line; binary payloads travel as base64.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("line {line}: malformed message: {source}")]
    Malformed {
        line: u64,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: not valid UTF-8")]
    InvalidUtf8 { line: u64 },
    #[error("line {line}: truncated message (no terminating newline)")]
    Truncated { line: u64 },
    #[error("line {line}: {reason}")]
    Invalid { line: u64, reason: String },
}

impl ProtocolError {
    pub fn line(&self) -> u64 {
        match self {
            ProtocolError::Malformed { line, .. }
            | ProtocolError::InvalidUtf8 { line }
            | ProtocolError::Truncated { line }
            | ProtocolError::Invalid { line, .. } => *line,
        }
    }
}

/// Serializes one message followed by `\n`.
pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(msg).expect("protocol messages serialize");
    out.push(b'\n');
    out
}

/// Parses one line (with or without its trailing newline).
pub fn decode<T: DeserializeOwned>(line: &[u8], line_no: u64) -> Result<T, ProtocolError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let text = std::str::from_utf8(line).map_err(|_| ProtocolError::InvalidUtf8 { line: line_no })?;
    serde_json::from_str(text).map_err(|source| ProtocolError::Malformed { line: line_no, source })
}

/// Incremental decoder that accepts arbitrarily chunked input.
#[derive(Debug, Default)]
pub struct LineDecoder {
    buf: Vec<u8>,
    line: u64,
}

impl LineDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds raw bytes and returns every message completed by them. Blank
    /// lines are skipped.
    pub fn feed<T: DeserializeOwned>(&mut self, chunk: &[u8]) -> Vec<Result<T, ProtocolError>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &b) in chunk.iter().enumerate() {
            if b != b'\n' {
                continue;
            }
            self.buf.extend_from_slice(&chunk[start..i]);
            start = i + 1;
            self.line += 1;
            let line = std::mem::take(&mut self.buf);
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            out.push(decode(&line, self.line));
        }
        self.buf.extend_from_slice(&chunk[start..]);
        out
    }

    /// Signals end of input; leftover bytes are a truncated message.
    pub fn finish(&mut self) -> Result<(), ProtocolError> {
        if self.buf.iter().all(u8::is_ascii_whitespace) {
            self.buf.clear();
            Ok(())
        } else {
            self.buf.clear();
            Err(ProtocolError::Truncated { line: self.line + 1 })
        }
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn chunked_feed() {
        let a = encode(&json!({"id": 1}));
        let b = encode(&json!({"id": 2, "x": "y"}));
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let mut dec = LineDecoder::new();
        let mut got: Vec<Value> = Vec::new();
        for byte in &all {
            got.extend(dec.feed::<Value>(std::slice::from_ref(byte)).into_iter().map(Result::unwrap));
        }
        assert_eq!(got, vec![json!({"id": 1}), json!({"id": 2, "x": "y"})]);
        assert!(dec.finish().is_ok());
    }

    #[test]
    fn truncated_input() {
        let mut dec = LineDecoder::new();
        assert_eq!(dec.feed::<Value>(b"{\"id\": 1}\n{\"id\":").len(), 1);
        assert!(matches!(dec.finish(), Err(ProtocolError::Truncated { line: 2 })));

        let err = decode::<Value>(b"{\"id\": 3", 7).unwrap_err();
        assert_eq!(err.line(), 7);
    }

    #[test]
    fn bad_line_reports_position() {
        let mut dec = LineDecoder::new();
        let out = dec.feed::<Value>(b"{}\n\n{oops}\n{}\n");
        assert_eq!(out.len(), 3);
        assert!(out[0].is_ok() && out[2].is_ok());
        assert_eq!(out[1].as_ref().unwrap_err().line(), 3);
    }
}
