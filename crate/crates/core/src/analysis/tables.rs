//! Plot-ready CSV tables. Empty groups are written with an empty value.

use std::io::Write;

use super::{CkaReport, NormProfile, TrajectoryPoint};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Columns `layer,sum_value,metric,value` with metrics `mean_norm` and
/// `count`.
pub fn write_norm_profile(p: &NormProfile, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "sum_value", "metric", "value"]).map_err(csv_err)?;
    for l in &p.layers {
        for g in &l.groups {
            let (layer, sum) = (l.layer.to_string(), g.sum.to_string());
            out.write_record([&layer, &sum, "mean_norm", &opt(g.mean_norm)]).map_err(csv_err)?;
            out.write_record([&layer, &sum, "count", &g.count.to_string()]).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Columns `condition,value`.
pub fn write_cka(r: &CkaReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "value"]).map_err(csv_err)?;
    for e in &r.entries {
        out.write_record([e.condition.name(), &e.value.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `epoch,group,value`.
pub fn write_trajectory(points: &[TrajectoryPoint], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "group", "value"]).map_err(csv_err)?;
    for p in points {
        out.write_record([&p.epoch.to_string(), &p.group, &opt(p.value)]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
