//! Hemisphere direction dictionary, Gaussian angular blur, label
//! encoding, and peak extraction.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::signal::FiberConfig;

/// Directions below 1e-3 after blurring carry no label mass.
pub const LABEL_CLIP: f64 = 1e-3;

/// Default angular blur width in radians.
pub const DEFAULT_SIGMA: f64 = 0.1;

/// m axes sampled near-uniformly over the hemisphere, plus pairwise
/// axial angles and an adjacency structure for peak detection.
#[derive(Debug, Clone)]
pub struct SphereDictionary {
    pub directions: Vec<Vec3>,
    /// theta_ij = arccos(min(1, |d_i . d_j|)), row-major m x m.
    pub angle_matrix: Vec<f64>,
    /// Atoms within r_adj of each atom, excluding itself.
    pub adjacency: Vec<Vec<u32>>,
    /// Construction inputs, kept for persistence.
    pub seed: u64,
    /// Set when repulsion hit the iteration cap before settling.
    pub converged: bool,
}

impl SphereDictionary {
    pub fn m(&self) -> usize {
        self.directions.len()
    }

    #[inline]
    pub fn angle(&self, i: usize, j: usize) -> f64 {
        self.angle_matrix[i * self.m() + j]
    }

    /// Largest angle from any atom to its closest neighbor.
    pub fn max_nearest_neighbor_angle(&self) -> f64 {
        let m = self.m();
        (0..m)
            .map(|i| {
                (0..m)
                    .filter(|&j| j != i)
                    .map(|j| self.angle(i, j))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    pub fn min_pairwise_angle(&self) -> f64 {
        let m = self.m();
        let mut best = f64::INFINITY;
        for i in 0..m {
            for j in (i + 1)..m {
                best = best.min(self.angle(i, j));
            }
        }
        best
    }

    /// SHA-256 of the canonical direction rendering; ties models to the
    /// dictionary they were trained against.
    pub fn checksum(&self) -> String {
        use std::fmt::Write as _;
        let mut text = String::new();
        for d in &self.directions {
            writeln!(text, "{:.12e} {:.12e} {:.12e}", d.x, d.y, d.z).unwrap();
        }
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in h.finalize() {
            write!(out, "{byte:02x}").unwrap();
        }
        out
    }
}

/// Spherical-Fibonacci start: 2m points, then antipodal pairing.
fn fibonacci_sphere(count: usize) -> Vec<Vec3> {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Hemisphere representative of an axis: z > 0, ties broken by x > 0
/// then y > 0.
fn hemisphere_rep(v: Vec3) -> Vec3 {
    if v.z > 0.0 {
        return v;
    }
    if v.z < 0.0 {
        return v.scale(-1.0);
    }
    if v.x > 0.0 {
        return v;
    }
    if v.x < 0.0 {
        return v.scale(-1.0);
    }
    if v.y >= 0.0 {
        v
    } else {
        v.scale(-1.0)
    }
}

/// Places m axes by electrostatic repulsion over 2m antipodally paired
/// points. Deterministic for a fixed seed and budget.
pub fn build_dictionary(m: usize, seed: u64) -> Result<SphereDictionary> {
    if m < 4 {
        return Err(Error::Config(format!("dictionary needs m >= 4, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Jitter the Fibonacci start so ties at symmetric m are broken
    // reproducibly, keep only one point per antipodal pair.
    let mut points: Vec<Vec3> = fibonacci_sphere(2 * m)
        .into_iter()
        .take(m)
        .map(|p| {
            let j = crate::geom::sample_gaussian3(&mut rng, 1e-3);
            p.add(j).normalized(1e-9).unwrap()
        })
        .collect();

    // Gradient descent on the Coulomb energy of the 2m-point set
    // {p_i, -p_i}; forces on a pair are equal and opposite, so only the
    // representatives are tracked.
    let max_iters = 2000;
    let tol = 1e-9;
    let mut step = 0.05;
    let mut last_energy = f64::INFINITY;
    let mut best = points.clone();
    let mut best_energy = f64::INFINITY;
    let mut converged = false;

    for _ in 0..max_iters {
        let mut energy = 0.0;
        let mut forces = vec![Vec3::new(0.0, 0.0, 0.0); m];
        for i in 0..m {
            for j in (i + 1)..m {
                // Interactions of p_i with both p_j and -p_j.
                for sign in [1.0, -1.0] {
                    let q = points[j].scale(sign);
                    let d = points[i].sub(q);
                    let dist2 = d.dot(d).max(1e-12);
                    let dist = dist2.sqrt();
                    energy += 1.0 / dist;
                    let f = d.scale(1.0 / (dist2 * dist));
                    forces[i] = forces[i].add(f);
                    forces[j] = forces[j].sub(f.scale(sign));
                }
            }
        }

        if energy < best_energy {
            best_energy = energy;
            best = points.clone();
        }
        if (last_energy - energy).abs() < tol * energy.abs() {
            converged = true;
            break;
        }
        if energy > last_energy {
            step *= 0.5;
        }
        last_energy = energy;

        for i in 0..m {
            // Tangential component only; radial moves leave the sphere.
            let radial = points[i].scale(forces[i].dot(points[i]));
            let tangent = forces[i].sub(radial);
            let moved = points[i].add(tangent.scale(step / m as f64));
            points[i] = moved.normalized(1e-12).unwrap();
        }
    }
    let points = best;

    let directions: Vec<Vec3> = points.into_iter().map(hemisphere_rep).collect();

    let mut angle_matrix = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let c = directions[i].dot(directions[j]).abs().min(1.0);
                angle_matrix[i * m + j] = c.acos();
            }
        }
    }

    for i in 0..m {
        for j in (i + 1)..m {
            if angle_matrix[i * m + j] < 1e-6 {
                return Err(Error::Solver(format!(
                    "dictionary atoms {i} and {j} collapsed to the same axis"
                )));
            }
        }
    }

    let max_nn = {
        let mut worst = 0.0f64;
        for i in 0..m {
            let mut nn = f64::INFINITY;
            for j in 0..m {
                if j != i {
                    nn = nn.min(angle_matrix[i * m + j]);
                }
            }
            worst = worst.max(nn);
        }
        worst
    };
    let r_adj = 1.5 * max_nn;
    let adjacency: Vec<Vec<u32>> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i && angle_matrix[i * m + j] <= r_adj)
                .map(|j| j as u32)
                .collect()
        })
        .collect();

    Ok(SphereDictionary { directions, angle_matrix, adjacency, seed, converged })
}

/// Index of the atom with maximal |dot| against `d`; lowest index wins
/// ties.
pub fn nearest_atom(dict: &SphereDictionary, d: Vec3) -> usize {
    let mut best = 0;
    let mut best_dot = -1.0;
    for (k, atom) in dict.directions.iter().enumerate() {
        let a = atom.dot(d).abs();
        if a > best_dot {
            best_dot = a;
            best = k;
        }
    }
    best
}

/// Gaussian angular blur W_ij = exp(-theta_ij^2 / (2 sigma^2)).
#[derive(Debug, Clone)]
pub struct GaussianWeights {
    pub sigma: f64,
    pub matrix: Vec<f64>,
    pub m: usize,
}

impl GaussianWeights {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.m + j]
    }
}

pub fn gaussian_weight_matrix(dict: &SphereDictionary, sigma: f64) -> Result<GaussianWeights> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let m = dict.m();
    let matrix = dict
        .angle_matrix
        .iter()
        .map(|&t| (-t * t / (2.0 * sigma * sigma)).exp())
        .collect();
    Ok(GaussianWeights { sigma, matrix, m })
}

/// Places each fraction at its nearest atom, blurs with W, clips small
/// entries, and renormalizes to unit mass.
pub fn encode_labels(dict: &SphereDictionary, w: &GaussianWeights, config: &FiberConfig) -> Vec<f64> {
    let m = dict.m();
    debug_assert_eq!(w.m, m);
    let mut sparse = vec![0.0; m];
    for (&alpha, &pdd) in config.alphas.iter().zip(&config.pdds) {
        sparse[nearest_atom(dict, pdd)] += alpha;
    }
    let mut label = vec![0.0; m];
    for (k, &mass) in sparse.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let row = &w.matrix[k * m..(k + 1) * m];
        for (dst, &wij) in label.iter_mut().zip(row) {
            *dst += mass * wij;
        }
    }
    for v in &mut label {
        if *v < LABEL_CLIP {
            *v = 0.0;
        }
    }
    let sum: f64 = label.iter().sum();
    assert!(sum > 0.0, "clipping removed all label mass");
    for v in &mut label {
        *v /= sum;
    }
    label
}

/// Directional peak with its share of the coefficient mass.
#[derive(Debug, Clone, Copy)]
pub struct Peak {
    pub direction: Vec3,
    pub weight: f64,
    pub atom: usize,
}

/// Outcome of peak extraction; `degenerate` marks near-flat inputs
/// where the peak set is arbitrary.
#[derive(Debug, Clone)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
    pub degenerate: bool,
}

/// Local maxima of the coefficient field over the adjacency graph,
/// thresholded at rel_threshold * max, greedily separated by min_sep,
/// top 3 kept, weights renormalized.
pub fn extract_peaks(
    dict: &SphereDictionary,
    coeffs: &[f64],
    rel_threshold: f64,
    min_sep: f64,
) -> PeakSet {
    let m = dict.m();
    debug_assert_eq!(coeffs.len(), m);
    let max = coeffs.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return PeakSet { peaks: Vec::new(), degenerate: true };
    }
    let threshold = rel_threshold * max;
    let min = coeffs.iter().cloned().fold(f64::INFINITY, f64::min);
    let degenerate = (max - min) < 1e-12 * max.max(1.0);

    let mut candidates: Vec<usize> = (0..m)
        .filter(|&k| {
            coeffs[k] >= threshold
                && dict.adjacency[k].iter().all(|&j| coeffs[j as usize] <= coeffs[k])
        })
        .collect();
    // Strongest first; index order breaks exact ties deterministically.
    candidates.sort_by(|&a, &b| {
        coeffs[b].partial_cmp(&coeffs[a]).unwrap().then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for k in candidates {
        if kept.len() == 3 {
            break;
        }
        if kept.iter().all(|&p| dict.angle(p, k) >= min_sep) {
            kept.push(k);
        }
    }

    let total: f64 = kept.iter().map(|&k| coeffs[k]).sum();
    let peaks = kept
        .into_iter()
        .map(|k| Peak { direction: dict.directions[k], weight: coeffs[k] / total, atom: k })
        .collect();
    PeakSet { peaks, degenerate }
}

#[derive(Serialize, Deserialize)]
struct DictFile {
    m: usize,
    seed: u64,
    converged: bool,
    directions: Vec<[f64; 3]>,
}

pub fn save_dictionary(dict: &SphereDictionary, path: &Path) -> Result<()> {
    let file = DictFile {
        m: dict.m(),
        seed: dict.seed,
        converged: dict.converged,
        directions: dict.directions.iter().map(|d| d.to_array()).collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("dictionary serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dictionary(path: &Path) -> Result<SphereDictionary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DictFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if file.directions.len() != file.m {
        return Err(Error::parse(
            path,
            format!("manifest m = {} but {} directions stored", file.m, file.directions.len()),
        ));
    }
    let m = file.m;
    let directions: Vec<Vec3> = file.directions.iter().map(|&a| Vec3::from_array(a)).collect();
    for (i, d) in directions.iter().enumerate() {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::parse(path, format!("direction {i} is not unit-norm")));
        }
    }
    let mut angle_matrix = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let c = directions[i].dot(directions[j]).abs().min(1.0);
                angle_matrix[i * m + j] = c.acos();
            }
        }
    }
    let mut max_nn = 0.0f64;
    for i in 0..m {
        let mut nn = f64::INFINITY;
        for j in 0..m {
            if j != i {
                nn = nn.min(angle_matrix[i * m + j]);
            }
        }
        max_nn = max_nn.max(nn);
    }
    let r_adj = 1.5 * max_nn;
    let adjacency: Vec<Vec<u32>> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i && angle_matrix[i * m + j] <= r_adj)
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    Ok(SphereDictionary {
        directions,
        angle_matrix,
        adjacency,
        seed: file.seed,
        converged: file.converged,
    })
}

/// Draws a uniformly random unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = crate::geom::sample_gaussian3(rng, 1.0);
        if let Some(u) = v.normalized(1e-9) {
            return u;
        }
    }
}
