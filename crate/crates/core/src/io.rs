//! Plain-text data files.
//!
//! * edge list: a header line `n <count>`, then one `i j` pair per line;
//!   blank lines and lines starting with `#` are skipped
//! * covariates CSV: header `id,x1,...,xp`, one row per individual
//! * outcomes CSV: header `id,y` with `y` in `{0, 1}`
//! * trajectory CSV: `id,time,outcome`, with an empty time for `∞`

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::process::Trajectory;
use crate::rates::Theta;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| io_err(path, e))
}

pub fn read_edge_list(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut n = None;
    let mut edges = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx as u64 + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match (n, fields.as_slice()) {
            (None, ["n", count]) => {
                n = Some(
                    count
                        .parse::<usize>()
                        .map_err(|_| parse_err(path, lineno, format!("bad node count {count:?}")))?,
                );
            }
            (None, _) => return Err(parse_err(path, lineno, "expected header `n <count>`")),
            (Some(_), [a, b]) => {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| parse_err(path, lineno, format!("bad node index {s:?}")))
                };
                edges.push((parse(a)?, parse(b)?));
            }
            (Some(_), _) => return Err(parse_err(path, lineno, "expected two node indices")),
        }
    }
    let n = n.ok_or_else(|| parse_err(path, 1, "missing header `n <count>`"))?;
    Network::from_edges(n, &edges).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_edge_list(path: &Path, net: &Network) -> Result<()> {
    let mut f = create(path)?;
    let mut out = format!("n {}\n", net.len());
    for (i, j) in net.edges() {
        out.push_str(&format!("{i} {j}\n"));
    }
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Reads `id,...` rows; ids must be a permutation of `0..n`.
fn read_id_table(path: &Path, min_cols: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(path, source),
            other => parse_err(path, 1, format!("{other:?}")),
        })?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < min_cols || header[0] != "id" {
        return Err(parse_err(path, 1, format!("header must start with `id` and have {min_cols}+ columns")));
    }
    let mut rows: Vec<Option<Vec<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad id {:?}", &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("bad number {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].replace(vals).is_some() {
            return Err(parse_err(path, line, format!("duplicate id {id}")));
        }
    }
    let n = rows.len();
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| parse_err(path, 0, format!("ids must cover 0..{n}; {i} is missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, rows))
}

pub fn read_covariates(path: &Path) -> Result<Covariates> {
    let (header, rows) = read_id_table(path, 1)?;
    let p = header.len() - 1;
    let n = rows.len();
    let data = rows.into_iter().flatten().collect::<Vec<_>>();
    Covariates::new(n, p, data)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_covariates(path: &Path, x: &Covariates) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string()];
    header.extend((1..=x.n_cols()).map(|k| format!("x{k}")));
    let map = |e: csv::Error| parse_err(path, 0, e.to_string());
    w.write_record(&header).map_err(map)?;
    for i in 0..x.n_rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_outcomes(path: &Path) -> Result<Vec<bool>> {
    let (header, rows) = read_id_table(path, 2)?;
    if header.len() != 2 || header[1] != "y" {
        return Err(parse_err(path, 1, "header must be `id,y`"));
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| match r[0] {
            0.0 => Ok(false),
            1.0 => Ok(true),
            v => Err(parse_err(path, 0, format!("outcome of {i} is {v}, expected 0 or 1"))),
        })
        .collect()
}

pub fn write_outcomes(path: &Path, y: &[bool]) -> Result<()> {
    let mut f = create(path)?;
    let mut out = String::from("id,y\n");
    for (i, &v) in y.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", v as u8));
    }
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn write_trajectory(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(trajectory_csv(tr).as_bytes()).map_err(|e| io_err(path, e))
}

pub fn trajectory_csv(tr: &Trajectory) -> String {
    let mut out = String::from("id,time,outcome\n");
    for i in 0..tr.len() {
        let t = tr.times[i];
        let t = if t.is_finite() { format!("{t:?}") } else { String::new() };
        out.push_str(&format!("{i},{t},{}\n", tr.outcomes[i] as u8));
    }
    out
}

pub fn read_theta(path: &Path) -> Result<Theta> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_theta(path: &Path, theta: &Theta) -> Result<()> {
    let text = serde_json::to_string_pretty(theta)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
