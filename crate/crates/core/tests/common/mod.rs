//! Oracles for the acceptance checks, written against the problem
//! statements rather than the library's solver structure.

use fodkit::mlp::MlpNet;
use fodkit::volume::Volume4D;

const LP_EPS: f64 = 1e-11;

/// Minimum transport cost via a dense two-phase tableau simplex with
/// Bland's rule. Nothing is shared with the library's tree-based
/// solver: flow variables are enumerated row by row, the marginals are
/// raw equality constraints, and artificials carry phase one. The last
/// demand absorbs any rounding slack between the marginal sums.
pub fn transport_lp_oracle(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let p = supply.len();
    let q = demand.len();
    assert!(p > 0 && q > 0 && cost.len() == p * q, "malformed oracle instance");

    let mut rhs: Vec<f64> = supply.iter().chain(demand.iter()).copied().collect();
    let slack: f64 = supply.iter().sum::<f64>() - demand.iter().sum::<f64>();
    rhs[p + q - 1] += slack;

    let nv = p * q;
    let nc = p + q;
    let cols = nv + nc;
    let width = cols + 1;
    let mut t = vec![0.0f64; nc * width];
    for i in 0..p {
        for j in 0..q {
            t[i * width + i * q + j] = 1.0;
        }
    }
    for j in 0..q {
        for i in 0..p {
            t[(p + j) * width + i * q + j] = 1.0;
        }
    }
    for r in 0..nc {
        t[r * width + nv + r] = 1.0;
        t[r * width + cols] = rhs[r];
    }
    let mut basis: Vec<usize> = (nv..cols).collect();

    // Phase one drives the artificial sum to zero, phase two prices
    // only structural columns so artificials can never re-enter.
    for phase in 0..2 {
        let mut obj = vec![0.0f64; width];
        let enterable = if phase == 0 {
            for c in nv..cols {
                obj[c] = 1.0;
            }
            cols
        } else {
            obj[..nv].copy_from_slice(cost);
            nv
        };
        for r in 0..nc {
            let cb = obj[basis[r]];
            if cb != 0.0 {
                for c in 0..width {
                    obj[c] -= cb * t[r * width + c];
                }
            }
        }
        let mut optimal = false;
        for _pivot in 0..20_000 {
            let Some(enter) = (0..enterable).find(|&c| obj[c] < -LP_EPS) else {
                optimal = true;
                break;
            };
            let mut leave: Option<usize> = None;
            let mut best = f64::INFINITY;
            for r in 0..nc {
                let coef = t[r * width + enter];
                if coef > LP_EPS {
                    let ratio = t[r * width + cols] / coef;
                    let better = ratio < best - LP_EPS
                        || (ratio < best + LP_EPS
                            && leave.is_some_and(|l| basis[r] < basis[l]));
                    if better {
                        best = ratio;
                        leave = Some(r);
                    }
                }
            }
            let leave = leave.expect("balanced transport polytope is bounded");
            let inv = 1.0 / t[leave * width + enter];
            for c in 0..width {
                t[leave * width + c] *= inv;
            }
            for r in 0..nc {
                if r != leave {
                    let coef = t[r * width + enter];
                    if coef != 0.0 {
                        for c in 0..width {
                            t[r * width + c] -= coef * t[leave * width + c];
                        }
                    }
                }
            }
            let coef = obj[enter];
            if coef != 0.0 {
                for c in 0..width {
                    obj[c] -= coef * t[leave * width + c];
                }
            }
            basis[leave] = enter;
        }
        assert!(optimal, "oracle exceeded the pivot budget");
        if phase == 0 {
            let infeasibility: f64 = (0..nc)
                .filter(|&r| basis[r] >= nv)
                .map(|r| t[r * width + cols])
                .sum();
            assert!(
                infeasibility.abs() <= 1e-7,
                "oracle phase one left infeasibility {infeasibility}"
            );
        }
    }

    (0..nc)
        .filter(|&r| basis[r] < nv)
        .map(|r| cost[basis[r]] * t[r * width + cols])
        .sum()
}

/// Reference neighborhood prediction: for every voxel, gather the
/// 3x3x3 patch with explicit bounds checks standing in for zero
/// padding, run a one-row forward pass, clamp negatives. No
/// partitioning and no batching anywhere.
pub fn naive_neighborhood_predict(net: &MlpNet<f32>, vol: &Volume4D) -> Vec<f32> {
    let (nx, ny, nz, n) = vol.dims;
    let m = net.output_dim();
    let mut out = vec![0.0f32; nx * ny * nz * m];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let mut patch: Vec<f32> = Vec::with_capacity(27 * n);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            let (pi, pj, pk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            let inside = pi >= 0
                                && pi < nx as i64
                                && pj >= 0
                                && pj < ny as i64
                                && pk >= 0
                                && pk < nz as i64;
                            if inside {
                                patch.extend_from_slice(vol.voxel(
                                    pi as usize,
                                    pj as usize,
                                    pk as usize,
                                ));
                            } else {
                                patch.extend(std::iter::repeat(0.0f32).take(n));
                            }
                        }
                    }
                }
                let pred = net
                    .forward_inference(&patch)
                    .expect("reference forward pass accepts one row");
                let v = (i * ny + j) * nz + k;
                for (dst, p) in out[v * m..(v + 1) * m].iter_mut().zip(pred) {
                    *dst = p.max(0.0);
                }
            }
        }
    }
    out
}
