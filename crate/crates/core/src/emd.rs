//! Earth mover's distance between coefficient vectors on the sphere
//! dictionary, solved exactly with the transportation simplex. Ground
//! cost is the axial angle between atoms in degrees.

use crate::error::{Error, Result};
use crate::sphere::SphereDictionary;

/// Mass below this is dropped from a support before solving.
pub const SUPPORT_PRUNE: f64 = 1e-12;

// Reduced-cost slack: above f64 noise from potential chains, and the
// duality gap it admits (eps * total mass) stays below 1e-9.
const COST_EPS: f64 = 1e-10;
const MAX_PIVOTS_FACTOR: usize = 200;

/// Exact minimum-cost transport between `supply` and `demand`.
/// `cost` is row-major `supply.len() x demand.len()`; masses must be
/// positive and the two sides must balance to within 1e-9.
pub fn transport_min_cost(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<f64> {
    let p = supply.len();
    let q = demand.len();
    if p == 0 || q == 0 {
        return Err(Error::Solver("transport requires nonempty supports".into()));
    }
    if cost.len() != p * q {
        return Err(Error::Solver(format!(
            "cost matrix has {} entries, expected {}",
            cost.len(),
            p * q
        )));
    }
    if supply.iter().chain(demand).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Solver("transport masses must be positive and finite".into()));
    }
    let total_a: f64 = supply.iter().sum();
    let total_b: f64 = demand.iter().sum();
    if (total_a - total_b).abs() > 1e-9 * total_a.max(total_b) {
        return Err(Error::Solver(format!(
            "unbalanced transport: supply {total_a} vs demand {total_b}"
        )));
    }
    // Absorb rounding slack into the last demand so sums match exactly.
    let mut a = supply.to_vec();
    let mut b = demand.to_vec();
    let slack: f64 = total_a - total_b;
    b[q - 1] += slack;
    if b[q - 1] <= 0.0 {
        return Err(Error::Solver("balance adjustment emptied a demand".into()));
    }

    // Northwest-corner initial basis: exactly p + q - 1 cells, zeros kept.
    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(p + q - 1);
    let mut flows: Vec<f64> = Vec::with_capacity(p + q - 1);
    {
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = a[i].min(b[j]);
            cells.push((i, j));
            flows.push(f);
            a[i] -= f;
            b[j] -= f;
            if i + 1 == p && j + 1 == q {
                break;
            }
            if (a[i] <= b[j] && i + 1 < p) || j + 1 == q {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), p + q - 1);
    }

    let mut basic = vec![false; p * q];
    for &(i, j) in &cells {
        basic[i * q + j] = true;
    }

    let max_pivots = MAX_PIVOTS_FACTOR * (p + q) + 1000;
    let mut degenerate_streak = 0usize;
    let bland_after = 2 * (p + q);

    for _pivot in 0..max_pivots {
        // Potentials from the basis tree: u[i] + v[j] = c[i][j].
        let mut u = vec![f64::NAN; p];
        let mut v = vec![f64::NAN; q];
        {
            let mut row_cells: Vec<Vec<usize>> = vec![Vec::new(); p];
            let mut col_cells: Vec<Vec<usize>> = vec![Vec::new(); q];
            for (ci, &(i, j)) in cells.iter().enumerate() {
                row_cells[i].push(ci);
                col_cells[j].push(ci);
            }
            u[0] = 0.0;
            // Nodes: rows 0..p then cols p..p+q.
            let mut stack = vec![0usize];
            while let Some(node) = stack.pop() {
                if node < p {
                    for &ci in &row_cells[node] {
                        let (i, j) = cells[ci];
                        if v[j].is_nan() {
                            v[j] = cost[i * q + j] - u[i];
                            stack.push(p + j);
                        }
                    }
                } else {
                    let jn = node - p;
                    for &ci in &col_cells[jn] {
                        let (i, j) = cells[ci];
                        if u[i].is_nan() {
                            u[i] = cost[i * q + j] - v[j];
                            stack.push(i);
                        }
                    }
                }
            }
            if u.iter().any(|x| x.is_nan()) || v.iter().any(|x| x.is_nan()) {
                return Err(Error::Solver("transport basis lost connectivity".into()));
            }
        }

        // Entering cell: most negative reduced cost, or Bland's rule
        // (first negative in row-major order) after a degenerate run.
        let use_bland = degenerate_streak >= bland_after;
        let mut enter: Option<(usize, usize)> = None;
        let mut best = -COST_EPS;
        'scan: for i in 0..p {
            for j in 0..q {
                if basic[i * q + j] {
                    continue;
                }
                let r = cost[i * q + j] - u[i] - v[j];
                if use_bland {
                    if r < -COST_EPS {
                        enter = Some((i, j));
                        break 'scan;
                    }
                } else if r < best {
                    best = r;
                    enter = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = enter else {
            let obj = cells
                .iter()
                .zip(&flows)
                .map(|(&(i, j), &f)| f * cost[i * q + j])
                .sum();
            return Ok(obj);
        };

        // Unique cycle: path from row ei to col ej through basic cells.
        let path = basis_path(&cells, p, q, ei, ej)?;
        // Cycle edges alternate signs starting with + on the entering
        // cell; `path` lists basis cell indices from the ej end back to
        // the ei end, so the first path edge gets -.
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (k, &ci) in path.iter().enumerate() {
            if k % 2 == 0 {
                let f = flows[ci];
                if f < theta || (f == theta && leave.map_or(true, |l| ci < l)) {
                    theta = f;
                    leave = Some(ci);
                }
            }
        }
        let leave = leave.ok_or_else(|| Error::Solver("transport cycle without minus edges".into()))?;
        if theta <= 0.0 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        for (k, &ci) in path.iter().enumerate() {
            if k % 2 == 0 {
                flows[ci] = (flows[ci] - theta).max(0.0);
            } else {
                flows[ci] += theta;
            }
        }
        let (li, lj) = cells[leave];
        basic[li * q + lj] = false;
        basic[ei * q + ej] = true;
        cells[leave] = (ei, ej);
        flows[leave] = theta;
    }
    Err(Error::Solver("transport simplex exceeded its pivot budget".into()))
}

/// Basis cell indices along the tree path from column `ej` to row `ei`,
/// ordered starting at the `ej` end (the edge adjacent to the entering
/// cell's column comes first).
fn basis_path(
    cells: &[(usize, usize)],
    p: usize,
    q: usize,
    ei: usize,
    ej: usize,
) -> crate::error::Result<Vec<usize>> {
    // Nodes: 0..p rows, p..p+q cols. Edges are basis cells.
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); p + q];
    for (ci, &(i, j)) in cells.iter().enumerate() {
        adj[i].push((p + j, ci));
        adj[p + j].push((i, ci));
    }
    let start = p + ej;
    let goal = ei;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; p + q];
    let mut seen = vec![false; p + q];
    seen[start] = true;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        for &(next, ci) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, ci));
                queue.push_back(next);
            }
        }
    }
    if !seen[goal] {
        return Err(Error::Solver("transport basis path not found".into()));
    }
    // Walk back from the row end; reverse so the list starts at ej.
    let mut edges = Vec::new();
    let mut node = goal;
    while let Some((prev, ci)) = parent[node] {
        edges.push(ci);
        node = prev;
    }
    edges.reverse();
    Ok(edges)
}

/// Prunes sub-threshold mass and L1-normalizes. Errors when the sum is
/// zero or further than 1e-6 from one; sums within 1e-9 pass untouched.
fn prepare_support(coeffs: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut idx = Vec::new();
    let mut mass = Vec::new();
    for (i, &c) in coeffs.iter().enumerate() {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::Solver(format!("coefficient {i} is {c}; need finite nonnegative")));
        }
        if c > SUPPORT_PRUNE {
            idx.push(i);
            mass.push(c);
        }
    }
    if idx.is_empty() {
        return Err(Error::Solver("coefficient vector has no mass above the prune threshold".into()));
    }
    let sum: f64 = mass.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Solver(format!(
            "coefficient mass {sum} too far from 1 to renormalize"
        )));
    }
    if (summ_err(sum)) > 1e-9 {
        for v in &mut mass {
            *v /= sum;
        }
    }
    Ok((idx, mass))
}

#[inline]
fn summ_err(sum: f64) -> f64 {
    (sum - 1.0).abs()
}

/// EMD between two coefficient vectors over the dictionary's atoms.
pub fn emd(dict: &SphereDictionary, pcoef: &[f64], qcoef: &[f64]) -> Result<f64> {
    let m = dict.m();
    if pcoef.len() != m || qcoef.len() != m {
        return Err(Error::Solver(format!(
            "coefficient lengths {} and {} do not match dictionary size {m}",
            pcoef.len(),
            qcoef.len()
        )));
    }
    let (pi, pm) = prepare_support(pcoef)?;
    let (qi, qm) = prepare_support(qcoef)?;
    let mut cost = vec![0.0; pi.len() * qi.len()];
    for (r, &i) in pi.iter().enumerate() {
        for (c, &j) in qi.iter().enumerate() {
            cost[r * qi.len() + c] = dict.angle(i, j).to_degrees();
        }
    }
    transport_min_cost(&pm, &qm, &cost)
}
