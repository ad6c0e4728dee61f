//! Metrics and sparsity profiling: mean depth error, per-layer densities
//! and the grouped firing-rate report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DepthMap, ForwardTrace};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of nonzero entries. A cell holding a count of 2 counts once.
pub fn density<T: Scalar>(t: &Tensor<T>) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.data().iter().filter(|v| !v.is_zero()).count() as f64 / t.len() as f64
}

/// Mean spike count per entry.
pub fn spike_mass<T: Scalar>(t: &Tensor<T>) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64
}

/// Mean absolute depth error over pixels valid in `gt`, in centimeters.
pub fn mde(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "mde",
            format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..gt.depth.len() {
        if gt.valid[i] {
            sum += (pred.depth[i] as f64 - gt.depth[i] as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidGroundTruth);
    }
    Ok(100.0 * sum / n as f64)
}

/// Report groups and the layer-name predicate selecting their members.
pub const GROUPS: [&str; 4] = ["Left Encoder", "Right Encoder", "Bottleneck", "Decoder"];

pub fn group_of(layer: &str) -> &'static str {
    if layer == "out_combined" || layer == "out_rconv" {
        "Bottleneck"
    } else if layer.starts_with("out_deconv") || layer.starts_with("out_add") {
        "Decoder"
    } else if layer.ends_with('R') {
        "Right Encoder"
    } else {
        "Left Encoder"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub layer: String,
    /// Nonzero fraction, averaged over samples.
    pub density: f64,
    /// Mean count per entry, averaged over samples.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub rows: Vec<DensityRow>,
    /// `(group, mean density of member rows)`; absent groups are skipped.
    pub groups: Vec<(String, f64)>,
    pub mde_cm: f64,
    pub samples: usize,
}

/// Running per-layer sums, so a split can be profiled without keeping
/// every trace alive.
#[derive(Debug, Clone, Default)]
pub struct DensityAccumulator {
    names: Vec<String>,
    density: Vec<f64>,
    mass: Vec<f64>,
    samples: usize,
}

impl DensityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T>(&mut self, trace: &ForwardTrace<T>) {
        if self.samples == 0 {
            self.names = trace.layers.iter().map(|l| l.name.clone()).collect();
            self.density = vec![0.0; self.names.len()];
            self.mass = vec![0.0; self.names.len()];
        }
        debug_assert_eq!(self.names.len(), trace.layers.len());
        for (i, l) in trace.layers.iter().enumerate() {
            self.density[i] += l.density;
            self.mass[i] += l.mass;
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Per-layer mean densities so far, in trace order.
    pub fn means(&self) -> Vec<(String, f64)> {
        let n = self.samples.max(1) as f64;
        self.names.iter().cloned().zip(self.density.iter().map(|d| d / n)).collect()
    }

    pub fn finish(&self, mde_cm: f64) -> Result<DensityReport> {
        if self.samples == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = self.samples as f64;
        let rows: Vec<DensityRow> = (0..self.names.len())
            .map(|i| DensityRow { layer: self.names[i].clone(), density: self.density[i] / n, mass: self.mass[i] / n })
            .collect();
        let groups = GROUPS
            .iter()
            .filter_map(|g| {
                let members: Vec<f64> = rows.iter().filter(|r| group_of(&r.layer) == *g).map(|r| r.density).collect();
                (!members.is_empty()).then(|| (g.to_string(), members.iter().sum::<f64>() / members.len() as f64))
            })
            .collect();
        Ok(DensityReport { rows, groups, mde_cm, samples: self.samples })
    }
}

/// Per-sample-mean densities over a set of traces.
pub fn density_report<T>(traces: &[ForwardTrace<T>], mde_cm: f64) -> Result<DensityReport> {
    let mut acc = DensityAccumulator::new();
    for t in traces {
        acc.add(t);
    }
    acc.finish(mde_cm)
}

fn pct(x: f64) -> f64 {
    (1000.0 * x).round() / 10.0
}

impl DensityReport {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|(g, _)| g == name).map(|g| g.1)
    }

    pub fn row(&self, layer: &str) -> Option<&DensityRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// `layer,group,density_pct,mass`, then one `mean` line per group and a
    /// final `mde_cm` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,group,density_pct,mass\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.1},{:.6}", r.layer, group_of(&r.layer), pct(r.density), r.mass).unwrap();
        }
        for (g, d) in &self.groups {
            writeln!(s, "mean,{g},{:.1},", pct(*d)).unwrap();
        }
        writeln!(s, "mde_cm,,{:.2},", self.mde_cm).unwrap();
        s
    }

    /// Aligned table, one block per group followed by its mean.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<22}{:>12}{:>10}", "Layer", "Density (%)", "Mass").unwrap();
        for (g, mean) in &self.groups {
            writeln!(s, "{}", "-".repeat(44)).unwrap();
            for r in self.rows.iter().filter(|r| group_of(&r.layer) == g) {
                writeln!(s, "{:<22}{:>12.1}{:>10.4}", r.layer, pct(r.density), r.mass).unwrap();
            }
            writeln!(s, "{:<22}{:>12.1}", format!("{g} Mean"), pct(*mean)).unwrap();
        }
        writeln!(s, "{}", "=".repeat(44)).unwrap();
        writeln!(s, "{:<22}{:>12.2}", "Model MDE [cm]", self.mde_cm).unwrap();
        s
    }

    /// Two reports in adjacent columns, e.g. without and with a penalty.
    /// Rows follow `self`; layers missing from `other` print as `-`.
    pub fn side_by_side(&self, other: &DensityReport, labels: (&str, &str)) -> String {
        let mut s = String::new();
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |d| format!("{:.1}", pct(d)));
        writeln!(s, "{:<22}{:>14}{:>14}", "Layer", labels.0, labels.1).unwrap();
        for (g, mean) in &self.groups {
            writeln!(s, "{}", "-".repeat(50)).unwrap();
            for r in self.rows.iter().filter(|r| group_of(&r.layer) == g) {
                let theirs = other.row(&r.layer).map(|o| o.density);
                writeln!(s, "{:<22}{:>14}{:>14}", r.layer, cell(Some(r.density)), cell(theirs)).unwrap();
            }
            writeln!(s, "{:<22}{:>14}{:>14}", format!("{g} Mean"), cell(Some(*mean)), cell(other.group(g))).unwrap();
        }
        writeln!(s, "{}", "=".repeat(50)).unwrap();
        writeln!(s, "{:<22}{:>14.2}{:>14.2}", "Model MDE [cm]", self.mde_cm, other.mde_cm).unwrap();
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(Error::io(&csv))?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.to_text()).map_err(Error::io(&txt))
    }
}

/// 16-bit grayscale PGM with depth scaled linearly so `d_max` maps to 65535.
pub fn write_depth_pgm(map: &DepthMap, d_max: f64, path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for (&d, &v) in map.depth.iter().zip(&map.valid) {
        let q = if v { ((d as f64 / d_max).clamp(0.0, 1.0) * 65535.0).round() as u16 } else { 0 };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf).map_err(Error::io(path))
}

/// Raw raster: `H: u32, W: u32`, then `H·W` little-endian f32, NaN where invalid.
pub fn encode_depth_raster(map: &DepthMap) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * map.depth.len());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    for (&d, &v) in map.depth.iter().zip(&map.valid) {
        buf.extend_from_slice(&(if v { d } else { f32::NAN }).to_le_bytes());
    }
    buf
}

pub fn decode_depth_raster(bytes: &[u8], origin: &str) -> Result<DepthMap> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(origin.to_string()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::Truncated(origin.to_string()));
    }
    let depth: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let valid = depth.iter().map(|d| !d.is_nan()).collect();
    DepthMap::new(h, w, depth, valid).map_err(|e| Error::Format { path: origin.to_string(), detail: e.to_string() })
}

pub fn write_depth_raster(map: &DepthMap, path: &Path) -> Result<()> {
    fs::write(path, encode_depth_raster(map)).map_err(Error::io(path))
}

pub fn read_depth_raster(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_depth_raster(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{traced_layer_names, LayerRecord, Mode};
    use crate::snn::SpikeTensor;
    use crate::autodiff::{Tape, Var};

    #[test]
    fn density_counts_nonzero_cells() {
        let t = Tensor::from_vec(&[4], vec![0.0f32, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(density(&t), 0.5);
        assert_eq!(spike_mass(&t), 0.75);
        assert_eq!(density(&Tensor::<f32>::zeros(&[3, 3])), 0.0);
    }

    #[test]
    fn mde_of_constant_offset() {
        let gt = DepthMap::constant(4, 4, 3.0);
        assert_eq!(mde(&gt, &gt).unwrap(), 0.0);
        let pred = DepthMap::constant(4, 4, 3.1);
        assert!((mde(&pred, &gt).unwrap() - 10.0).abs() < 1e-4);
        let mut sparse = gt.clone();
        sparse.valid.iter_mut().for_each(|v| *v = false);
        assert!(matches!(mde(&pred, &sparse), Err(Error::NoValidGroundTruth)));
    }

    #[test]
    fn mde_ignores_invalid_ground_truth() {
        let mut gt = DepthMap::constant(1, 2, 1.0);
        gt.valid[1] = false;
        gt.depth[1] = f32::NAN;
        let pred = DepthMap::new(1, 2, vec![1.5, 9.0], vec![true; 2]).unwrap();
        assert!((mde(&pred, &gt).unwrap() - 50.0).abs() < 1e-9);
    }

    fn fake_trace(mode: Mode, fill: f64) -> ForwardTrace<f64> {
        let mut tape = Tape::<f64>::new();
        let layers = traced_layer_names(mode)
            .into_iter()
            .map(|name| {
                let snapshot = Tensor::from_fn(&[4], |i| if (i as f64) < fill * 4.0 { 1.0 } else { 0.0 });
                let var: Var = tape.constant(snapshot.clone());
                LayerRecord {
                    name,
                    spikes: SpikeTensor::new(&tape, var, 1),
                    density: density(&snapshot),
                    mass: spike_mass(&snapshot),
                    snapshot,
                }
            })
            .collect();
        ForwardTrace { layers, intermediate_predictions: vec![], preacts: vec![], contributions: vec![] }
    }

    #[test]
    fn report_averages_samples_and_groups() {
        let report = density_report(&[fake_trace(Mode::Binocular, 0.25), fake_trace(Mode::Binocular, 0.75)], 12.0).unwrap();
        assert!(report.rows.iter().all(|r| (r.density - 0.5).abs() < 1e-12));
        let names: Vec<_> = report.rows.iter().map(|r| r.layer.clone()).collect();
        assert_eq!(names, traced_layer_names(Mode::Binocular));
        assert_eq!(report.groups.len(), 4);
        let decoder: Vec<_> = report.rows.iter().filter(|r| group_of(&r.layer) == "Decoder").collect();
        assert_eq!(decoder.len(), 8);
        let mean = decoder.iter().map(|r| r.density).sum::<f64>() / 8.0;
        assert_eq!(report.group("Decoder"), Some(mean));
        assert!(report.to_text().contains("Decoder Mean"));
        assert!(report.to_csv().lines().any(|l| l == "out_add1,Decoder,50.0,0.500000"));
    }

    #[test]
    fn monocular_report_has_no_right_encoder() {
        let report = density_report(&[fake_trace(Mode::Monocular, 0.0)], 0.0).unwrap();
        assert!(report.group("Right Encoder").is_none());
        assert!(report.rows.iter().all(|r| r.density == 0.0));
        assert!(density_report::<f64>(&[], 0.0).is_err());
    }

    #[test]
    fn raster_round_trip_preserves_mask() {
        let mut m = DepthMap::constant(2, 3, 4.5);
        m.valid[4] = false;
        m.depth[4] = 0.0;
        let back = decode_depth_raster(&encode_depth_raster(&m), "mem").unwrap();
        assert_eq!(back.valid, m.valid);
        assert_eq!(back.depth[0], 4.5);
        assert!(back.depth[4].is_nan());
        assert!(matches!(decode_depth_raster(&encode_depth_raster(&m)[..10], "mem"), Err(Error::Truncated(_))));
    }
}
