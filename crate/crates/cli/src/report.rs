use std::io::{self, Write};

use serde::Serialize;
use serde_json::Value;

use crate::args::Format;

pub const OK: u8 = 0;
/// Validation, domain, conflict or not-found.
pub const INVALID: u8 = 1;
pub const USAGE: u8 = 2;
/// I/O or network.
pub const IO: u8 = 3;

/// What a command reports: exit code, human-readable summary, errors and a
/// machine-readable detail document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitReport {
    pub exit_code: u8,
    pub summary: String,
    pub errors: Vec<String>,
    pub detail: Value,
}

impl ExitReport {
    pub fn ok(summary: impl Into<String>, detail: Value) -> Self {
        ExitReport { exit_code: OK, summary: summary.into(), errors: Vec::new(), detail }
    }

    pub fn fail(code: u8, message: impl Into<String>) -> Self {
        ExitReport { exit_code: code, summary: String::new(), errors: vec![message.into()], detail: Value::Null }
    }

    pub fn with_errors(mut self, errors: impl IntoIterator<Item = String>) -> Self {
        self.errors.extend(errors);
        self
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = summary.into();
        self
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn emit(&self, format: Format) -> io::Result<()> {
        match format {
            Format::Json => {
                let mut out = io::stdout().lock();
                serde_json::to_writer_pretty(&mut out, self)?;
                writeln!(out)
            }
            Format::Text => {
                if !self.summary.is_empty() {
                    let mut out = io::stdout().lock();
                    write!(out, "{}", self.summary)?;
                    if !self.summary.ends_with('\n') {
                        writeln!(out)?;
                    }
                }
                let mut err = io::stderr().lock();
                for e in &self.errors {
                    writeln!(err, "error: {e}")?;
                }
                Ok(())
            }
        }
    }
}

/// Early exit from a command.
pub type CmdResult = Result<ExitReport, ExitReport>;
