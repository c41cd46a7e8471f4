use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First line of every metrics and aggregate file.
pub const METRICS_VERSION_LINE: &str = "# metagrad-metrics v1";

pub const METRICS_COLUMNS: [&str; 9] = [
    "meta_update",
    "env_steps",
    "mean_return",
    "gamma",
    "meta_grad",
    "meta_grad_fd",
    "advantage_mean",
    "advantage_std",
    "wall_clock_s",
];

/// Per-seed quantities averaged in an aggregate file.
pub const AGGREGATED: [&str; 6] = ["mean_return", "gamma", "meta_grad", "meta_grad_fd", "advantage_mean", "advantage_std"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub meta_update: usize,
    pub env_steps: u64,
    /// Mean return of episodes that finished during this update, if any did.
    pub mean_return: Option<f64>,
    /// Discount after this update.
    pub gamma: f64,
    pub meta_grad: f64,
    pub meta_grad_fd: Option<f64>,
    pub advantage_mean: f64,
    pub advantage_std: f64,
    pub wall_clock_s: Option<f64>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

pub fn write_metrics<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "{METRICS_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    let mut prev: Option<usize> = None;
    for r in rows {
        if prev.is_some_and(|p| r.meta_update <= p) {
            return Err(Error::State(format!("metrics rows out of order at update {}", r.meta_update)));
        }
        prev = Some(r.meta_update);
        w.write_record([
            r.meta_update.to_string(),
            r.env_steps.to_string(),
            cell(r.mean_return),
            format!("{:?}", r.gamma),
            format!("{:?}", r.meta_grad),
            cell(r.meta_grad_fd),
            format!("{:?}", r.advantage_mean),
            format!("{:?}", r.advantage_std),
            cell(r.wall_clock_s),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed metrics-style table: named columns of optional numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Reads a versioned metrics or aggregate file.
pub fn read_table<R: Read>(input: R) -> Result<Table> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != METRICS_VERSION_LINE {
        return Err(Error::Schema(format!("expected `{METRICS_VERSION_LINE}`, found `{}`", first.trim_end())));
    }
    let mut r = csv::Reader::from_reader(reader);
    let columns: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|_| Error::Schema(format!("not a number: `{c}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_table(f)
}

/// Population mean and standard deviation of the present values.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Per-update mean and standard deviation across seeds, over the updates
/// every run reached.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Result<Table> {
    if runs.is_empty() {
        return Err(Error::Schema("no runs to aggregate".into()));
    }
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let mut columns = vec!["meta_update".to_string(), "env_steps".to_string(), "seeds".to_string()];
    for q in AGGREGATED {
        columns.push(format!("{q}_mean"));
        columns.push(format!("{q}_std"));
    }
    let mut rows = Vec::with_capacity(len);
    for i in 0..len {
        let first = &runs[0][i];
        if runs.iter().any(|r| r[i].meta_update != first.meta_update) {
            return Err(Error::Schema(format!("runs disagree on the update index of row {i}")));
        }
        let mut row = vec![Some(first.meta_update as f64), Some(first.env_steps as f64), Some(runs.len() as f64)];
        for q in AGGREGATED {
            let xs: Vec<f64> = runs
                .iter()
                .filter_map(|r| {
                    let m = &r[i];
                    match q {
                        "mean_return" => m.mean_return,
                        "gamma" => Some(m.gamma),
                        "meta_grad" => Some(m.meta_grad),
                        "meta_grad_fd" => m.meta_grad_fd,
                        "advantage_mean" => Some(m.advantage_mean),
                        _ => Some(m.advantage_std),
                    }
                })
                .collect();
            if xs.is_empty() {
                row.extend([None, None]);
            } else {
                let (m, s) = mean_std(&xs);
                row.extend([Some(m), Some(s)]);
            }
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

pub fn write_table<W: Write>(mut out: W, table: &Table) -> Result<()> {
    writeln!(out, "{METRICS_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.columns).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record(r.iter().map(|c| cell(*c))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Converts a per-run table back into rows.
pub fn rows_from_table(t: &Table) -> Result<Vec<MetricsRow>> {
    for c in METRICS_COLUMNS {
        t.column(c)?;
    }
    let get = |name: &str| t.column(name).expect("checked");
    let cols: Vec<Vec<Option<f64>>> = METRICS_COLUMNS.iter().map(|c| get(c)).collect();
    let need = |v: Option<f64>, c: &str| v.ok_or_else(|| Error::Schema(format!("empty `{c}` cell")));
    (0..t.rows.len())
        .map(|i| {
            Ok(MetricsRow {
                meta_update: need(cols[0][i], "meta_update")? as usize,
                env_steps: need(cols[1][i], "env_steps")? as u64,
                mean_return: cols[2][i],
                gamma: need(cols[3][i], "gamma")?,
                meta_grad: need(cols[4][i], "meta_grad")?,
                meta_grad_fd: cols[5][i],
                advantage_mean: need(cols[6][i], "advantage_mean")?,
                advantage_std: need(cols[7][i], "advantage_std")?,
                wall_clock_s: cols[8][i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, g: f64) -> MetricsRow {
        MetricsRow {
            meta_update: i,
            env_steps: 10 * i as u64,
            mean_return: if i.is_multiple_of(2) { Some(1.0 + g) } else { None },
            gamma: g,
            meta_grad: -0.25,
            meta_grad_fd: None,
            advantage_mean: 0.1,
            advantage_std: 0.3,
            wall_clock_s: None,
        }
    }

    #[test]
    fn round_trip() {
        let rows: Vec<_> = (1..5).map(|i| row(i, 0.9 + i as f64 / 100.0)).collect();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(METRICS_VERSION_LINE));
        assert_eq!(text.lines().nth(1).unwrap(), METRICS_COLUMNS.join(","));
        let back = rows_from_table(&read_table(&buf[..]).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn out_of_order_rows_are_rejected() {
        let mut buf = Vec::new();
        assert!(write_metrics(&mut buf, &[row(2, 0.9), row(2, 0.9)]).is_err());
    }

    #[test]
    fn aggregate_single_seed_has_zero_std() {
        let a = aggregate(&[vec![row(1, 0.9), row(2, 0.95)]]).unwrap();
        assert_eq!(a.column("gamma_std").unwrap(), vec![Some(0.0), Some(0.0)]);
        assert_eq!(a.column("mean_return_mean").unwrap(), vec![None, Some(1.95)]);
    }

    #[test]
    fn aggregate_two_seeds() {
        let a = aggregate(&[vec![row(1, 0.9)], vec![row(1, 1.0)]]).unwrap();
        let m = a.column("gamma_mean").unwrap()[0].unwrap();
        let s = a.column("gamma_std").unwrap()[0].unwrap();
        assert!((m - 0.95).abs() < 1e-15 && (s - 0.05).abs() < 1e-15);
    }

    #[test]
    fn bad_files_are_schema_errors() {
        assert!(matches!(read_table(&b"meta_update\n1\n"[..]), Err(Error::Schema(_))));
        let text = format!("{METRICS_VERSION_LINE}\nmeta_update,gamma\n1,x\n");
        assert!(matches!(read_table(text.as_bytes()), Err(Error::Schema(_))));
        let text = format!("{METRICS_VERSION_LINE}\nmeta_update\n1\n");
        assert!(matches!(read_table(text.as_bytes()).unwrap().column("gamma"), Err(Error::Schema(_))));
        assert!(matches!(aggregate(&[]), Err(Error::Schema(_))));
    }
}
