use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};

/// Append-only CSV loss log; the header is written once per new file.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    pub fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let exists = path.exists() && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !exists {
            writer.write_record(header).map_err(|e| csv_err(path, e))?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { writer })
    }

    pub fn row(&mut self, step: u64, values: &[f64]) -> Result<()> {
        let mut rec = vec![step.to_string()];
        rec.extend(values.iter().map(|v| format!("{v:.8e}")));
        self.writer
            .write_record(&rec)
            .map_err(|e| Error::InvalidValue(format!("loss log: {e}")))?;
        self.writer
            .flush()
            .map_err(|e| Error::InvalidValue(format!("loss log: {e}")))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::InvalidValue(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        LossLog::open(&p, &["step", "a"]).unwrap().row(0, &[1.0]).unwrap();
        LossLog::open(&p, &["step", "a"]).unwrap().row(1, &[0.5]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,a");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,5.0"));
    }
}
