//! CSV exports: per-epoch metrics and weight-magnitude heatmaps.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, LayerKind};
use crate::trainer::EpochMetrics;

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "params",
    "flops",
    "event",
];

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub fn write_metrics<W: Write>(metrics: &[EpochMetrics], w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(METRICS_HEADER)?;
    for m in metrics {
        out.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_accuracy.to_string(),
            m.test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            m.active_params.to_string(),
            m.flops.to_string(),
            m.event.as_str().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics(metrics, &mut buf)?;
    Ok(buf)
}

pub fn export_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    write_atomic(path, &metrics_csv(metrics)?)
}

/// `|w|` of a conv or fc layer as a grid with one row per input-wise index
/// (`c * K * K + kh * K + kw` for conv, the input feature for fc) and one
/// column per unit.
pub fn heatmap(net: &DynamicNetwork, layer: usize) -> Result<Vec<Vec<f32>>> {
    let node = net
        .layer(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} does not exist")))?;
    let w = match (node.kind(), node.weights()) {
        (LayerKind::Conv | LayerKind::Fc, Some(w)) => w,
        _ => {
            return Err(Error::InvalidInput(format!(
                "layer {layer} ({:?}) has no weights",
                node.kind()
            )))
        }
    };
    let units = w.shape()[0];
    let per_unit = w.len() / units;
    Ok((0..per_unit)
        .map(|r| (0..units).map(|u| w.data()[u * per_unit + r].abs()).collect())
        .collect())
}

pub fn heatmap_csv(net: &DynamicNetwork, layer: usize) -> Result<Vec<u8>> {
    let grid = heatmap(net, layer)?;
    let mut buf = Vec::new();
    {
        let mut out = csv_writer(&mut buf);
        for row in &grid {
            out.write_record(row.iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
    }
    Ok(buf)
}

pub fn export_heatmap(net: &DynamicNetwork, layer: usize, path: &Path) -> Result<()> {
    write_atomic(path, &heatmap_csv(net, layer)?)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkSpec;
    use crate::trainer::EpochEvent;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn metric(epoch: usize, event: EpochEvent) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 0.5 / epoch as f64,
            train_accuracy: 0.9,
            test_accuracy: if epoch == 2 { None } else { Some(0.875) },
            active_params: 100,
            flops: 2000,
            event,
        }
    }

    #[test]
    fn metrics_rows() {
        let ms = [
            metric(1, EpochEvent::None),
            metric(2, EpochEvent::Grow),
            metric(3, EpochEvent::Prune),
        ];
        let text = String::from_utf8(metrics_csv(&ms).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,train_loss,train_acc,test_acc,params,flops,event");
        assert_eq!(lines[1], "1,0.5,0.9,0.875,100,2000,none");
        assert_eq!(lines[2], "2,0.25,0.9,,100,2000,grow");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn heatmap_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DynamicNetwork::build(&NetworkSpec::lenet5(8, 4, 6, 10), &mut rng).unwrap();
        let grid = heatmap(&net, 0).unwrap();
        assert_eq!(grid.len(), 25);
        assert!(grid.iter().all(|r| r.len() == 8 && r.iter().all(|v| *v >= 0.0)));
        let w = net.layer(0).unwrap().weights().unwrap();
        assert_eq!(grid[7][3], w.at(&[3, 0, 1, 2]).abs());
        assert!(heatmap(&net, 1).is_err());
        let csv = String::from_utf8(heatmap_csv(&net, 0).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 25);
    }
}
