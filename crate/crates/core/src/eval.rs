//! Evaluation: angular-error matching against ground truth,
//! crossing-angle EMD heatmaps, and per-method summary reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emd::emd;
use crate::error::{Error, Result};
use crate::geom::{axial_angle, Vec3};
use crate::protocol::AcquisitionProtocol;
use crate::signal::{add_rician_noise, multi_tensor_signal, FiberConfig, REFERENCE_LAMBDAS};
use crate::sphere::{encode_labels, GaussianWeights, PeakSet, SphereDictionary};
use crate::synth::sample_rng;

/// Matched angular errors in degrees plus unmatched counts on both
/// sides.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularReport {
    pub matched: Vec<f64>,
    pub missed: usize,
    pub spurious: usize,
}

fn best_injection(small: &[Vec3], large: &[Vec3]) -> Vec<f64> {
    // Exhaustive over injections of the smaller axis set into the
    // larger; sizes are capped at 3 by construction, so at most 3!.
    fn recurse(
        small: &[Vec3],
        large: &[Vec3],
        depth: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<f64>,
        best_total: &mut f64,
        best: &mut Vec<f64>,
    ) {
        if depth == small.len() {
            let total: f64 = current.iter().sum();
            if total < *best_total {
                *best_total = total;
                best.clone_from(current);
            }
            return;
        }
        for j in 0..large.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            current.push(axial_angle(small[depth], large[j]).to_degrees());
            recurse(small, large, depth + 1, used, current, best_total, best);
            current.pop();
            used[j] = false;
        }
    }
    let mut used = vec![false; large.len()];
    let mut current = Vec::new();
    let mut best_total = f64::INFINITY;
    let mut best = Vec::new();
    recurse(small, large, 0, &mut used, &mut current, &mut best_total, &mut best);
    best
}

/// Optimal assignment between truth axes and extracted peaks,
/// minimizing total axial angle. Unmatched truths count as missed,
/// unmatched peaks as spurious.
pub fn angular_error(truth: &FiberConfig, peaks: &PeakSet) -> AngularReport {
    let t_axes: Vec<Vec3> = truth.pdds.clone();
    let p_axes: Vec<Vec3> = peaks.peaks.iter().map(|p| p.direction).collect();
    let (t, k) = (t_axes.len(), p_axes.len());
    let matched = if t == 0 || k == 0 {
        Vec::new()
    } else if t <= k {
        best_injection(&t_axes, &p_axes)
    } else {
        best_injection(&p_axes, &t_axes)
    };
    AngularReport {
        missed: t - matched.len(),
        spurious: k - matched.len(),
        matched,
    }
}

/// Geometry and sampling choices for one heatmap run. Axis values are
/// degrees; `axis1` is the angle of the second axis to the first,
/// `axis2` the elevation of the third axis out of their plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub axis1_deg: Vec<f64>,
    pub axis2_deg: Vec<f64>,
    pub alphas: [f64; 3],
    pub snr: f64,
    pub k_noise: usize,
    pub seed: u64,
    pub lambdas: [f64; 3],
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        let axis: Vec<f64> = (0..=18).map(|k| 5.0 * k as f64).collect();
        HeatmapConfig {
            axis1_deg: axis.clone(),
            axis2_deg: axis,
            alphas: [1.0 / 3.0; 3],
            snr: 30.0,
            k_noise: 25,
            seed: 0,
            lambdas: REFERENCE_LAMBDAS,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.axis1_deg.is_empty() || self.axis2_deg.is_empty() {
            return Err(Error::Config("heatmap axes must be nonempty".into()));
        }
        if self.k_noise == 0 {
            return Err(Error::Config("k_noise must be at least 1".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        // Surfaces alpha constraint violations before any cell runs.
        heatmap_cell_config(30.0, 30.0, self.alphas)?;
        Ok(())
    }
}

/// The three-fiber geometry of one heatmap cell: first axis fixed at
/// +x, second rotated by theta1 in the xy-plane, third elevated by
/// phi out of that plane with its azimuth on the in-plane bisector
/// (a reconstruction choice, recorded in the CSV header).
pub fn heatmap_cell_config(theta1_deg: f64, phi_deg: f64, alphas: [f64; 3]) -> Result<FiberConfig> {
    let t1 = theta1_deg.to_radians();
    let ph = phi_deg.to_radians();
    let d1 = Vec3::new(1.0, 0.0, 0.0);
    let d2 = Vec3::new(t1.cos(), t1.sin(), 0.0);
    let half = t1 / 2.0;
    let d3 = Vec3::new(ph.cos() * half.cos(), ph.cos() * half.sin(), ph.sin());
    FiberConfig::new(alphas.to_vec(), vec![d1, d2, d3])
}

/// Mean and spread of EMD per grid cell, axis1-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub config: HeatmapConfig,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl HeatmapGrid {
    #[inline]
    pub fn cell(&self, i1: usize, i2: usize) -> (f64, f64) {
        let idx = i1 * self.config.axis2_deg.len() + i2;
        (self.mean[idx], self.std[idx])
    }

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str(&format!(
            "# alphas={:.9},{:.9},{:.9} snr={} k_noise={} seed={} lambdas={:.6e},{:.6e},{:.6e}\n",
            c.alphas[0], c.alphas[1], c.alphas[2], c.snr, c.k_noise, c.seed,
            c.lambdas[0], c.lambdas[1], c.lambdas[2]
        ));
        out.push_str("# third axis azimuth fixed on the in-plane bisector (reconstruction choice)\n");
        out.push_str("theta1_deg,theta_plane_deg,emd_mean,emd_std\n");
        for (i1, &a1) in c.axis1_deg.iter().enumerate() {
            for (i2, &a2) in c.axis2_deg.iter().enumerate() {
                let (mean, std) = self.cell(i1, i2);
                out.push_str(&format!("{a1},{a2},{mean:.6},{std:.6}\n"));
            }
        }
        out
    }

    /// Self-contained SVG of the grid, linear blue-to-yellow scale.
    pub fn to_svg(&self) -> String {
        let c = &self.config;
        let (n1, n2) = (c.axis1_deg.len(), c.axis2_deg.len());
        let cell = 22.0;
        let margin = 60.0;
        let w = margin + n2 as f64 * cell + 20.0;
        let h = margin + n1 as f64 * cell + 20.0;
        let vmax = self.mean.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let (mean, _) = self.cell(i1, i2);
                let f = (mean / vmax).clamp(0.0, 1.0);
                let r = (40.0 + 215.0 * f) as u8;
                let g = (40.0 + 190.0 * f) as u8;
                let b = (120.0 - 80.0 * f) as u8;
                let x = margin + i2 as f64 * cell;
                let y = margin + (n1 - 1 - i1) as f64 * cell;
                svg.push_str(&format!(
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({r},{g},{b})\"><title>theta1={} plane={} emd={mean:.3}</title></rect>\n",
                    c.axis1_deg[i1], c.axis2_deg[i2]
                ));
            }
        }
        for (i1, &a1) in c.axis1_deg.iter().enumerate() {
            if i1 % 3 == 0 {
                let y = margin + (n1 - 1 - i1) as f64 * cell + cell * 0.7;
                svg.push_str(&format!(
                    "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"10\" text-anchor=\"end\">{a1}</text>\n",
                    margin - 6.0
                ));
            }
        }
        for (i2, &a2) in c.axis2_deg.iter().enumerate() {
            if i2 % 3 == 0 {
                let x = margin + i2 as f64 * cell + cell * 0.5;
                svg.push_str(&format!(
                    "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{a2}</text>\n",
                    margin + n1 as f64 * cell + 14.0
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"20\" font-size=\"11\">mean EMD (degrees), max {vmax:.2}</text>\n",
            margin
        ));
        svg.push_str("</svg>\n");
        svg
    }
}

/// Maps a noisy normalized signal to a length-m coefficient vector.
pub type Predictor<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// Per-cell: draw k_noise Rician realizations of the three-fiber
/// signal, predict, and average EMD against the encoded truth. Cells
/// run in parallel on per-cell derived rng streams.
pub fn heatmap(
    predictor: &Predictor<'_>,
    proto: &AcquisitionProtocol,
    dict: &SphereDictionary,
    weights: &GaussianWeights,
    cfg: &HeatmapConfig,
) -> Result<HeatmapGrid> {
    cfg.validate()?;
    let n2 = cfg.axis2_deg.len();
    let cells: Vec<(usize, usize)> = (0..cfg.axis1_deg.len())
        .flat_map(|i1| (0..n2).map(move |i2| (i1, i2)))
        .collect();

    let stats: Vec<(f64, f64)> = cells
        .par_iter()
        .map(|&(i1, i2)| {
            let config = heatmap_cell_config(cfg.axis1_deg[i1], cfg.axis2_deg[i2], cfg.alphas)?;
            let clean = multi_tensor_signal(proto, &config, cfg.lambdas, 1.0)?;
            let truth = encode_labels(dict, weights, &config);
            let mut rng = sample_rng(cfg.seed, i1 * n2 + i2);
            let mut values = Vec::with_capacity(cfg.k_noise);
            for _ in 0..cfg.k_noise {
                let noisy = add_rician_noise(&clean, cfg.snr, 1.0, &mut rng)?;
                let coeffs = predictor(&noisy)?;
                values.push(emd(dict, &coeffs, &truth)?);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let std = if values.len() > 1 {
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (values.len() - 1) as f64;
                var.sqrt()
            } else {
                0.0
            };
            Ok((mean, std))
        })
        .collect::<Result<_>>()?;

    Ok(HeatmapGrid {
        config: cfg.clone(),
        mean: stats.iter().map(|s| s.0).collect(),
        std: stats.iter().map(|s| s.1).collect(),
    })
}

/// Raw evaluation measurements for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub emd: Vec<f64>,
    /// Matched angular errors in degrees, pooled over voxels.
    pub angular: Vec<f64>,
    pub missed: usize,
    pub spurious: usize,
    pub seconds: f64,
}

/// Aggregates for one method; angular quantiles are None when no
/// fiber was matched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub emd_count: usize,
    pub emd_mean: f64,
    pub emd_median: f64,
    pub ang_p50: Option<f64>,
    pub ang_p90: Option<f64>,
    /// Matched-within-threshold over matched + missed: a missed fiber
    /// counts as a failure.
    pub success_rate: f64,
    pub missed: usize,
    pub spurious: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub success_threshold_deg: f64,
    pub rows: Vec<MethodSummary>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Aggregates per-method records in input order.
pub fn summarize(records: &[MetricRecord], success_threshold_deg: f64) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Config("summarize requires at least one metric record".into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        if rec.emd.is_empty() {
            return Err(Error::Config(format!("record '{}' has no emd entries", rec.method)));
        }
        let mut emd_sorted = rec.emd.clone();
        emd_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let emd_mean = rec.emd.iter().sum::<f64>() / rec.emd.len() as f64;
        let (ang_p50, ang_p90) = if rec.angular.is_empty() {
            (None, None)
        } else {
            let mut ang = rec.angular.clone();
            ang.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (Some(quantile(&ang, 0.5)), Some(quantile(&ang, 0.9)))
        };
        let hits = rec.angular.iter().filter(|&&a| a <= success_threshold_deg).count();
        let denom = rec.angular.len() + rec.missed;
        let success_rate = if denom == 0 { 0.0 } else { hits as f64 / denom as f64 };
        rows.push(MethodSummary {
            method: rec.method.clone(),
            emd_count: rec.emd.len(),
            emd_mean,
            emd_median: quantile(&emd_sorted, 0.5),
            ang_p50,
            ang_p90,
            success_rate,
            missed: rec.missed,
            spurious: rec.spurious,
            seconds: rec.seconds,
        });
    }
    Ok(Summary { success_threshold_deg, rows })
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,emd_count,emd_mean,emd_median,ang_p50,ang_p90,success_rate,missed,spurious,seconds\n",
        );
        let fmt_opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6},{},{},{:.3}\n",
                r.method,
                r.emd_count,
                r.emd_mean,
                r.emd_median,
                fmt_opt(r.ang_p50),
                fmt_opt(r.ang_p90),
                r.success_rate,
                r.missed,
                r.spurious,
                r.seconds
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
