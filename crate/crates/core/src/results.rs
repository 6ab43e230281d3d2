//! Metric records: `metric<TAB>split<TAB>value`, under a version header.

use std::fmt;
use std::path::Path;

use crate::error::{io_err, MsClipError, Result};

pub const HEADER: &str = "# results v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl ResultRecord {
    pub fn new(metric: impl Into<String>, split: impl Into<String>, value: f64) -> Self {
        Self { metric: metric.into(), split: split.into(), value }
    }
}

impl fmt::Display for ResultRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.metric, self.split, self.value)
    }
}

pub fn format_results(records: &[ResultRecord]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in records {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    let mut lines = text.lines();
    if lines.next().map(|l| l.trim_end_matches('\r')) != Some(HEADER) {
        return Err(MsClipError::Format { what: "results", msg: format!("first line must be {HEADER:?}") });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || MsClipError::Format { what: "results", msg: format!("line {}: {l:?}", i + 2) };
            let cols: Vec<&str> = l.trim_end_matches('\r').split('\t').collect();
            let [m, s, v] = cols[..] else { return Err(bad()) };
            Ok(ResultRecord::new(m, s, v.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, format_results(records)).map_err(io_err(path))
}
