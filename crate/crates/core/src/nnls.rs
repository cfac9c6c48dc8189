//! Non-negative least squares baseline: a fixed dictionary of
//! single-tensor signals fitted per voxel by the Lawson-Hanson
//! active-set method.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::dot;
use crate::protocol::AcquisitionProtocol;
use crate::signal::{single_tensor_signal, TensorSpec};
use crate::sphere::SphereDictionary;
use crate::volume::{Volume4D, VoxelMask};

/// n x m matrix of synthetic signals, one column per dictionary atom.
#[derive(Debug, Clone)]
pub struct SignalDictionary {
    /// Row-major n x m.
    pub atoms: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub includes_isotropic: bool,
}

impl SignalDictionary {
    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.atoms[row * self.m + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.entry(r, col)).collect()
    }
}

/// Column k = single_tensor_signal along dictionary direction k with
/// the shared eigenvalues; the optional isotropic column uses their
/// mean.
pub fn build_signal_dictionary(
    proto: &AcquisitionProtocol,
    dict: &SphereDictionary,
    lambdas: [f64; 3],
    include_isotropic: bool,
) -> Result<SignalDictionary> {
    let n = proto.n();
    let m = dict.m() + include_isotropic as usize;
    let mut atoms = vec![0.0; n * m];
    for (k, &d) in dict.directions.iter().enumerate() {
        let spec = TensorSpec::new(lambdas, d)?;
        let col = single_tensor_signal(proto, &spec, 1.0);
        for (r, v) in col.into_iter().enumerate() {
            atoms[r * m + k] = v;
        }
    }
    if include_isotropic {
        let iso = (lambdas[0] + lambdas[1] + lambdas[2]) / 3.0;
        let spec = TensorSpec::new([iso, iso, iso], crate::geom::Vec3::new(0.0, 0.0, 1.0))?;
        let col = single_tensor_signal(proto, &spec, 1.0);
        for (r, v) in col.into_iter().enumerate() {
            atoms[r * m + m - 1] = v;
        }
    }
    Ok(SignalDictionary { atoms, n, m, includes_isotropic: include_isotropic })
}

/// Least squares by Householder QR; `a` is row-major n x k with n >= k
/// columns assumed independent. Returns the k coefficients.
fn lstsq_qr(a: &mut [f64], rhs: &mut [f64], n: usize, k: usize) -> Result<Vec<f64>> {
    debug_assert!(n >= k);
    for col in 0..k {
        // Householder vector for column col below the diagonal.
        let mut norm = 0.0;
        for r in col..n {
            norm += a[r * k + col] * a[r * k + col];
        }
        let norm = norm.sqrt();
        if norm < 1e-300 {
            return Err(Error::Solver(format!("rank-deficient passive set at column {col}")));
        }
        let alpha = if a[col * k + col] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n - col];
        v[0] = a[col * k + col] - alpha;
        for r in col + 1..n {
            v[r - col] = a[r * k + col];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv < 1e-300 {
            continue;
        }
        a[col * k + col] = alpha;
        for r in col + 1..n {
            a[r * k + col] = 0.0;
        }
        // Apply H = I - 2 v v' / v'v to the remaining columns and rhs.
        for c in col + 1..k {
            let mut s = 0.0;
            for r in col..n {
                s += v[r - col] * a[r * k + c];
            }
            let f = 2.0 * s / vtv;
            for r in col..n {
                a[r * k + c] -= f * v[r - col];
            }
        }
        let mut s = 0.0;
        for r in col..n {
            s += v[r - col] * rhs[r];
        }
        let f = 2.0 * s / vtv;
        for r in col..n {
            rhs[r] -= f * v[r - col];
        }
    }
    // Back substitution on the upper-triangular system.
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let mut s = rhs[row];
        for c in row + 1..k {
            s -= a[row * k + c] * x[c];
        }
        x[row] = s / a[row * k + row];
    }
    Ok(x)
}

/// Precomputed problem state reused across many right-hand sides.
pub struct NnlsProblem {
    /// Column-major copy (m x n rows of length n) for fast gradients.
    cols: Vec<f64>,
    pub n: usize,
    pub m: usize,
    /// KKT tolerance: 1e-10 * max absolute row sum of A'A.
    pub tol: f64,
}

/// Result of one solve.
#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    /// Set when the iteration cap was reached; x is the best iterate.
    pub capped: bool,
}

impl NnlsProblem {
    /// `a` is row-major n x m.
    pub fn new(a: &[f64], n: usize, m: usize) -> Result<Self> {
        if a.len() != n * m || n == 0 || m == 0 {
            return Err(Error::Solver(format!(
                "matrix of {} entries does not match {n} x {m}",
                a.len()
            )));
        }
        let mut cols = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                cols[c * n + r] = a[r * m + c];
            }
        }
        // ||A'A||_inf = max_i sum_j |a_i . a_j|.
        let mut norm: f64 = 0.0;
        for i in 0..m {
            let ci = &cols[i * n..(i + 1) * n];
            let mut row_sum = 0.0;
            for j in 0..m {
                row_sum += dot(ci, &cols[j * n..(j + 1) * n]).abs();
            }
            norm = norm.max(row_sum);
        }
        Ok(NnlsProblem { cols, n, m, tol: 1e-10 * norm })
    }

    pub fn from_signal_dictionary(sd: &SignalDictionary) -> Result<Self> {
        Self::new(&sd.atoms, sd.n, sd.m)
    }

    #[inline]
    fn col(&self, c: usize) -> &[f64] {
        &self.cols[c * self.n..(c + 1) * self.n]
    }

    fn residual(&self, s: &[f64], x: &[f64], passive: &[usize]) -> Vec<f64> {
        let mut r = s.to_vec();
        for &c in passive {
            let xc = x[c];
            if xc != 0.0 {
                for (ri, &ai) in r.iter_mut().zip(self.col(c)) {
                    *ri -= xc * ai;
                }
            }
        }
        r
    }

    fn objective(&self, s: &[f64], x: &[f64], passive: &[usize]) -> f64 {
        let r = self.residual(s, x, passive);
        0.5 * dot(&r, &r)
    }

    /// Lawson-Hanson active set with QR on the passive columns.
    pub fn solve(&self, s: &[f64]) -> Result<NnlsSolution> {
        if s.len() != self.n {
            return Err(Error::Solver(format!(
                "rhs has {} entries, expected {}",
                s.len(),
                self.n
            )));
        }
        let m = self.m;
        let n = self.n;
        let mut x = vec![0.0; m];
        let mut in_passive = vec![false; m];
        let mut passive: Vec<usize> = Vec::new();

        let cap = 3 * m;
        let mut best_x = x.clone();
        let mut best_obj = self.objective(s, &x, &passive);
        let mut outer = 0usize;
        let mut capped = false;

        loop {
            // Gradient of 0.5||Ax - s||^2 is -A'r; w = A'r must be
            // <= tol on the active set at optimality.
            let r = self.residual(s, &x, &passive);
            let mut best_w = f64::NEG_INFINITY;
            let mut enter = None;
            for c in 0..m {
                if !in_passive[c] {
                    let w = dot(self.col(c), &r);
                    if w > best_w {
                        best_w = w;
                        enter = Some(c);
                    }
                }
            }
            let Some(enter) = enter else { break };
            if best_w <= self.tol {
                break;
            }
            outer += 1;
            if outer > cap {
                capped = true;
                break;
            }
            in_passive[enter] = true;
            passive.push(enter);

            // Inner loop: unconstrained LS on the passive set, walking
            // back along the segment when variables go nonpositive.
            loop {
                let k = passive.len();
                let mut sub = vec![0.0; n * k];
                for (ci, &c) in passive.iter().enumerate() {
                    for row in 0..n {
                        sub[row * k + ci] = self.col(c)[row];
                    }
                }
                let mut rhs = s.to_vec();
                let z = match lstsq_qr(&mut sub, &mut rhs, n, k) {
                    Ok(z) => z,
                    Err(_) => {
                        // Degenerate passive set: drop the newest column
                        // and accept the current iterate.
                        let last = passive.pop().unwrap();
                        in_passive[last] = false;
                        break;
                    }
                };
                if z.iter().all(|&zi| zi > 0.0) {
                    for (&c, &zi) in passive.iter().zip(&z) {
                        x[c] = zi;
                    }
                    break;
                }
                // Steplength to the first variable hitting zero.
                let mut alpha = f64::INFINITY;
                for (ci, &c) in passive.iter().enumerate() {
                    if z[ci] <= 0.0 {
                        let denom = x[c] - z[ci];
                        if denom > 0.0 {
                            alpha = alpha.min(x[c] / denom);
                        } else {
                            alpha = 0.0;
                        }
                    }
                }
                let alpha = alpha.min(1.0).max(0.0);
                for (ci, &c) in passive.iter().enumerate() {
                    x[c] += alpha * (z[ci] - x[c]);
                }
                // Remove every passive variable now at (or below) zero.
                let mut removed = false;
                let mut idx = 0;
                while idx < passive.len() {
                    let c = passive[idx];
                    if x[c] <= 1e-14 {
                        x[c] = 0.0;
                        in_passive[c] = false;
                        passive.swap_remove(idx);
                        removed = true;
                    } else {
                        idx += 1;
                    }
                }
                if !removed {
                    // No progress possible; accept the feasible iterate.
                    break;
                }
            }

            let obj = self.objective(s, &x, &passive);
            if obj < best_obj {
                best_obj = obj;
                best_x = x.clone();
            }
        }

        if capped {
            let final_obj = self.objective(s, &x, &passive);
            if final_obj < best_obj {
                best_x = x;
            }
            return Ok(NnlsSolution { x: best_x, capped: true });
        }
        Ok(NnlsSolution { x, capped: false })
    }

    /// Worst KKT violation of x: positive coordinates must have zero
    /// gradient, zero coordinates nonpositive descent direction.
    pub fn kkt_residual(&self, s: &[f64], x: &[f64]) -> f64 {
        let passive: Vec<usize> = (0..self.m).filter(|&c| x[c] > 0.0).collect();
        let r = self.residual(s, x, &passive);
        let mut worst = 0.0f64;
        for c in 0..self.m {
            let w = dot(self.col(c), &r);
            if x[c] > 0.0 {
                worst = worst.max(w.abs());
            } else {
                worst = worst.max(w);
            }
        }
        worst
    }
}

/// One-shot convenience wrapper over `NnlsProblem`.
pub fn nnls_solve(a: &[f64], n: usize, m: usize, s: &[f64]) -> Result<NnlsSolution> {
    NnlsProblem::new(a, n, m)?.solve(s)
}

/// Per-voxel fit report for a whole volume.
#[derive(Debug, Clone)]
pub struct NnlsReport {
    pub seconds: f64,
    pub capped_voxels: usize,
    pub solved_voxels: usize,
}

/// Fits every in-mask voxel and L1-normalizes coefficient rows with
/// positive sum. Zero voxels stay zero.
pub fn predict_nnls(
    vol: &Volume4D,
    sigdict: &SignalDictionary,
    mask: Option<&VoxelMask>,
) -> Result<(Volume4D, NnlsReport)> {
    let n = vol.channels();
    if sigdict.n != n {
        return Err(Error::Volume(format!(
            "signal dictionary expects {} channels, volume has {n}",
            sigdict.n
        )));
    }
    if let Some(mk) = mask {
        let (x, y, z, _) = vol.dims;
        if mk.dims != (x, y, z) {
            return Err(Error::Volume(format!(
                "mask dims {:?} do not match volume {:?}",
                mk.dims, vol.dims
            )));
        }
    }
    let problem = NnlsProblem::from_signal_dictionary(sigdict)?;
    let m = sigdict.m;
    let nvox = vol.voxel_count();
    let started = std::time::Instant::now();

    let rows: Vec<(Vec<f32>, bool, bool)> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            if !mask.map_or(true, |mk| mk.included[v]) {
                return Ok((vec![0.0f32; m], false, false));
            }
            let signal: Vec<f64> = vol.data[v * n..(v + 1) * n].iter().map(|&x| x as f64).collect();
            let sol = problem.solve(&signal)?;
            let sum: f64 = sol.x.iter().sum();
            let row: Vec<f32> = if sum > 0.0 {
                sol.x.iter().map(|&c| (c / sum) as f32).collect()
            } else {
                vec![0.0f32; m]
            };
            Ok((row, sol.capped, true))
        })
        .collect::<Result<_>>()?;

    let mut data = vec![0.0f32; nvox * m];
    let mut capped_voxels = 0;
    let mut solved_voxels = 0;
    for (v, (row, capped, solved)) in rows.into_iter().enumerate() {
        data[v * m..(v + 1) * m].copy_from_slice(&row);
        capped_voxels += capped as usize;
        solved_voxels += solved as usize;
    }

    let (x, y, z, _) = vol.dims;
    let out = Volume4D::new((x, y, z, m), data, vol.voxel_size)?;
    let report = NnlsReport {
        seconds: started.elapsed().as_secs_f64(),
        capped_voxels,
        solved_voxels,
    };
    Ok((out, report))
}
