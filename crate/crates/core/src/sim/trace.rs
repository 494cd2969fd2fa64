//! Newline-delimited JSON trace with a running SHA-256 digest.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::node::NodeEvent;

#[derive(Serialize)]
struct StepLine<'a> {
    s: u64,
    k: &'a str,
    p: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    from: Option<u32>,
}

#[derive(Serialize)]
struct EventLine<'a> {
    s: u64,
    p: u32,
    #[serde(flatten)]
    e: &'a NodeEvent,
}

#[derive(Serialize)]
struct NoteLine<'a> {
    s: u64,
    note: &'a str,
    detail: &'a str,
}

pub struct Trace {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    buf: Vec<u8>,
    pub records: u64,
}

impl Trace {
    pub fn new(capture: bool) -> Self {
        Trace { hasher: Sha256::new(), lines: capture.then(Vec::new), buf: Vec::with_capacity(128), records: 0 }
    }

    fn emit(&mut self, v: &impl Serialize) {
        self.buf.clear();
        serde_json::to_writer(&mut self.buf, v).expect("trace records serialize");
        self.buf.push(b'\n');
        self.hasher.update(&self.buf);
        if let Some(lines) = self.lines.as_mut() {
            lines.push(String::from_utf8_lossy(&self.buf[..self.buf.len() - 1]).into_owned());
        }
        self.records += 1;
    }

    pub fn step(&mut self, s: u64, kind: &str, p: Option<u32>, from: Option<u32>) {
        self.emit(&StepLine { s, k: kind, p, from });
    }

    pub fn event(&mut self, s: u64, p: u32, e: &NodeEvent) {
        self.emit(&EventLine { s, p, e });
    }

    pub fn note(&mut self, s: u64, note: &str, detail: &str) {
        self.emit(&NoteLine { s, note, detail });
    }

    pub fn hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn lines(&self) -> Option<&[String]> {
        self.lines.as_deref()
    }
}
