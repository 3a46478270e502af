use std::fmt::Display;
use std::io::Write;

use serde_json::Value;

/// Writes either a human line or a JSON record per call.
pub struct Output {
    json: bool,
    sink: Box<dyn Write>,
}

impl Output {
    pub fn new(json: bool) -> Self {
        Self {
            json,
            sink: Box::new(std::io::stdout()),
        }
    }

    pub fn emit(&mut self, human: impl Display, record: Value) {
        let r = if self.json {
            writeln!(self.sink, "{record}")
        } else {
            writeln!(self.sink, "{human}")
        };
        // A closed pipe is not worth a panic.
        let _ = r;
    }

    /// Human-mode only; JSON mode carries the same data elsewhere.
    pub fn human(&mut self, line: impl Display) {
        if !self.json {
            let _ = writeln!(self.sink, "{line}");
        }
    }
}
