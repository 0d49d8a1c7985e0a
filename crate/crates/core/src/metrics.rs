//! Line-delimited JSON metrics: one flat object per line, keys sorted.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{Number, Value};

use crate::error::{Error, Result};

/// A flat key → number/string record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record(BTreeMap<String, Value>);

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    /// Rejects NaN and infinities.
    pub fn num(&mut self, key: &str, value: f64) -> Result<&mut Self> {
        let n = Number::from_f64(value)
            .ok_or_else(|| Error::Metrics(format!("{key} = {value} is not representable")))?;
        self.0.insert(key.to_string(), Value::Number(n));
        Ok(self)
    }

    pub fn int(&mut self, key: &str, value: u64) -> &mut Self {
        self.0.insert(key.to_string(), Value::Number(value.into()));
        self
    }

    pub fn text(&mut self, key: &str, value: &str) -> &mut Self {
        self.0.insert(key.to_string(), Value::String(value.to_string()));
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).and_then(Value::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: &Record) {
        self.0.extend(other.0.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    pub fn to_line(&self) -> Result<String> {
        serde_json::to_string(&self.0).map_err(|e| Error::Metrics(e.to_string()))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let map: BTreeMap<String, Value> = serde_json::from_str(line).map_err(|e| Error::Metrics(e.to_string()))?;
        if let Some((k, _)) = map.iter().find(|(_, v)| !(v.is_number() || v.is_string())) {
            return Err(Error::Metrics(format!("field {k} is not a number or string")));
        }
        Ok(Record(map))
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    lines: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
            lines: 0,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
            lines: 0,
        })
    }

    pub fn emit(&mut self, record: &Record) -> Result<()> {
        let line = record.to_line()?;
        writeln!(self.out, "{line}")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines_written(&self) -> usize {
        self.lines
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Record::parse_line(&l?))
        .collect()
}
