//! Per-episode metrics as CSV, flushed after every row.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use seqrl::metrics::{kd_ratio, MetricsRow};

pub const HEADER: [&str; 8] = ["step", "episode", "return", "loss", "epsilon", "kills", "deaths", "kd_ratio"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn row_fields(r: &MetricsRow) -> [String; 8] {
    [
        r.step.to_string(),
        r.episode.to_string(),
        opt(r.ret),
        opt(r.loss),
        opt(r.epsilon),
        opt(r.kills),
        opt(r.deaths),
        opt(r.kd_ratio()),
    ]
}

pub struct MetricsWriter {
    out: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates (truncating) the file and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = csv::Writer::from_writer(file);
        out.write_record(HEADER)?;
        out.flush()?;
        Ok(MetricsWriter { out, last_step: None })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(prev) = self.last_step {
            if row.step < prev {
                bail!("metrics step went backwards: {} after {prev}", row.step);
            }
        }
        self.last_step = Some(row.step);
        self.out.write_record(row_fields(row))?;
        self.out.flush()?;
        Ok(())
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<Option<T>> {
    let s = rec.get(i).unwrap_or("");
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| anyhow::anyhow!("line {line}: bad `{}` value `{s}`", HEADER[i]))
}

/// Parse a metrics file back into rows, checking the header and the k/d column.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        bail!("{}: header is {:?}, expected {:?}", path.display(), header, HEADER);
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let req = |v: Option<u64>, name: &str| v.ok_or_else(|| anyhow::anyhow!("line {line}: `{name}` is blank"));
        let row = MetricsRow {
            step: req(field(&rec, 0, line)?, "step")?,
            episode: req(field(&rec, 1, line)?, "episode")?,
            ret: field(&rec, 2, line)?,
            loss: field(&rec, 3, line)?,
            epsilon: field(&rec, 4, line)?,
            kills: field(&rec, 5, line)?,
            deaths: field(&rec, 6, line)?,
        };
        let kd: Option<f64> = field(&rec, 7, line)?;
        if kd != row.kills.map(|k| kd_ratio(k, row.deaths.unwrap_or(0))) {
            bail!("line {line}: kd_ratio does not match kills and deaths");
        }
        rows.push(row);
    }
    Ok(rows)
}
