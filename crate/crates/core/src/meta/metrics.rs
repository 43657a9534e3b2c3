use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetaError, MetaTestResult, Result};

pub const METRICS_VERSION: u32 = 1;
pub const CURVES_VERSION: u32 = 1;

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    /// Mean return of the exploration trajectories collected this epoch.
    pub train_return: f64,
    /// Mean final-episode meta-test return (carried over when not evaluated).
    pub test_return: f64,
    pub evaluated: bool,
    pub kl_global: f64,
    pub kl_local: f64,
    pub kl_total: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub value_loss: f64,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [
            self.train_return,
            self.test_return,
            self.kl_global,
            self.kl_local,
            self.kl_total,
            self.actor_loss,
            self.critic_loss,
            self.value_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One point of an adaptation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub version: u32,
    pub seed: u64,
    pub task_id: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
}

impl CurveRow {
    pub fn from_result(seed: u64, result: &MetaTestResult) -> Vec<CurveRow> {
        result
            .task_ids
            .iter()
            .zip(&result.returns)
            .flat_map(|(&task_id, rets)| {
                rets.iter().enumerate().map(move |(episode, &ret)| CurveRow {
                    version: CURVES_VERSION,
                    seed,
                    task_id,
                    episode,
                    ret,
                })
            })
            .collect()
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| MetaError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    if let Some(row) = rows.iter().find(|r| r.version != METRICS_VERSION) {
        return Err(MetaError::Checkpoint(format!(
            "metrics version {} is not supported",
            row.version
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let dir = std::env::temp_dir().join(format!("metrics-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let rows = vec![MetricsRow {
            version: METRICS_VERSION,
            seed: 3,
            epoch: 0,
            train_return: -12.5,
            test_return: -3.25,
            evaluated: true,
            kl_global: 0.1,
            kl_local: 0.2,
            kl_total: 0.03,
            actor_loss: 1.0,
            critic_loss: 2.0,
            value_loss: 3.0,
        }];
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("version,seed,epoch,train_return,test_return"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn curve_rows() {
        let res = MetaTestResult {
            task_ids: vec![7, 9],
            returns: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        };
        let rows = CurveRow::from_result(1, &res);
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[3].task_id, rows[3].episode, rows[3].ret), (9, 1, 4.0));
    }
}
