use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::agent::UpdateRecord;
use crate::error::{Error, Result};

/// Append-only JSON-lines log, one record per update.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, record: &UpdateRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<UpdateRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Wilson score interval for `wins` successes out of `n` at normal
/// quantile `z`.
pub fn wilson_interval(wins: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = wins as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Mean silhouette coefficient of `points` under the grouping `labels`,
/// with Euclidean distance. Points in singleton clusters score 0.
pub fn silhouette<L: PartialEq>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::Invalid("silhouette needs at least two labelled points".into()));
    }
    let mut groups: Vec<&L> = Vec::new();
    let idx: Vec<usize> = labels
        .iter()
        .map(|l| match groups.iter().position(|g| *g == l) {
            Some(i) => i,
            None => {
                groups.push(l);
                groups.len() - 1
            }
        })
        .collect();
    if groups.len() < 2 {
        return Err(Error::Invalid("silhouette needs at least two clusters".into()));
    }
    let k = groups.len();
    let sizes: Vec<usize> = (0..k).map(|c| idx.iter().filter(|&&i| i == c).count()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[idx[j]] += dist(p, q);
            }
        }
        let own = idx[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
