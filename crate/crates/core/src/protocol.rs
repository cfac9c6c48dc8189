//! Acquisition protocol: b-values paired with gradient directions,
//! parsed from FSL-convention bvals/bvecs text files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Gradient table for one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    /// Unit gradient directions; zero vectors allowed only where b == 0.
    pub gradients: Vec<[f64; 3]>,
    /// b-values in s/mm^2, same length as `gradients`.
    pub bvalues: Vec<f64>,
}

impl AcquisitionProtocol {
    pub fn new(gradients: Vec<[f64; 3]>, bvalues: Vec<f64>) -> Result<Self> {
        let p = AcquisitionProtocol { gradients, bvalues };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.bvalues.len()
    }

    /// Indices of b == 0 acquisitions, in file order.
    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.bvalues[i] == 0.0).collect()
    }

    /// Indices of b > 0 acquisitions, in file order.
    pub fn dwi_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.bvalues[i] > 0.0).collect()
    }

    /// Protocol restricted to the b > 0 acquisitions.
    pub fn dwi_only(&self) -> AcquisitionProtocol {
        let idx = self.dwi_indices();
        AcquisitionProtocol {
            gradients: idx.iter().map(|&i| self.gradients[i]).collect(),
            bvalues: idx.iter().map(|&i| self.bvalues[i]).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.gradients.len() != self.bvalues.len() {
            return Err(Error::Protocol(format!(
                "{} gradients vs {} bvalues",
                self.gradients.len(),
                self.bvalues.len()
            )));
        }
        if self.bvalues.is_empty() {
            return Err(Error::Protocol("empty protocol".into()));
        }
        for (i, (g, &b)) in self.gradients.iter().zip(&self.bvalues).enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(Error::Protocol(format!("bvalue[{i}] = {b} is not a finite nonnegative number")));
            }
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if !norm.is_finite() {
                return Err(Error::Protocol(format!("gradient[{i}] has non-finite components")));
            }
            if b > 0.0 && (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Protocol(format!(
                    "gradient[{i}] has norm {norm} but b = {b} > 0 requires unit norm"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over a canonical text rendering; ties trained models to
    /// the exact protocol they were fit on.
    pub fn checksum(&self) -> String {
        let mut text = String::new();
        for (g, b) in self.gradients.iter().zip(&self.bvalues) {
            writeln!(text, "{:.9e} {:.9e} {:.9e} {:.9e}", b, g[0], g[1], g[2]).unwrap();
        }
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            write!(out, "{byte:02x}").unwrap();
        }
        out
    }
}

fn parse_numbers(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("bad number {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no numeric content"));
    }
    Ok(rows)
}

/// Loads an FSL-style protocol: bvals holds n scalars, bvecs holds three
/// rows of n components. Gradients with b > 0 are renormalized to unit
/// length; a zero gradient with b > 0 is an error.
pub fn load_protocol(bvals_path: &Path, bvecs_path: &Path) -> Result<AcquisitionProtocol> {
    let bvals: Vec<f64> = parse_numbers(bvals_path)?.into_iter().flatten().collect();
    let rows = parse_numbers(bvecs_path)?;
    if rows.len() != 3 {
        return Err(Error::parse(
            bvecs_path,
            format!("expected 3 rows of gradient components, found {}", rows.len()),
        ));
    }
    let n = bvals.len();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::parse(
                bvecs_path,
                format!("row {r} has {} entries but bvals has {n}", row.len()),
            ));
        }
    }
    for (i, &b) in bvals.iter().enumerate() {
        if !b.is_finite() {
            return Err(Error::parse(bvals_path, format!("non-finite bvalue at column {i}")));
        }
    }
    let mut gradients = Vec::with_capacity(n);
    for i in 0..n {
        let g = [rows[0][i], rows[1][i], rows[2][i]];
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(bvecs_path, format!("non-finite gradient at column {i}")));
        }
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if bvals[i] > 0.0 {
            if norm < 1e-12 {
                return Err(Error::Protocol(format!(
                    "gradient column {i} is zero but b = {} > 0",
                    bvals[i]
                )));
            }
            // Near-unit vectors are kept bit for bit so a save/load
            // round trip preserves the protocol checksum.
            if (norm - 1.0).abs() > 1e-6 {
                gradients.push([g[0] / norm, g[1] / norm, g[2] / norm]);
            } else {
                gradients.push(g);
            }
        } else {
            gradients.push(g);
        }
    }
    AcquisitionProtocol::new(gradients, bvals)
}

/// Writes the protocol back in the same two-file layout. Values use
/// shortest round-trip formatting, so loading reproduces every f64
/// bit for bit and the checksum survives the trip.
pub fn save_protocol(proto: &AcquisitionProtocol, bvals_path: &Path, bvecs_path: &Path) -> Result<()> {
    let bvals_text = proto
        .bvalues
        .iter()
        .map(|b| format!("{b}"))
        .collect::<Vec<_>>()
        .join(" ")
        + "\n";
    let mut bvecs_text = String::new();
    for axis in 0..3 {
        let row = proto
            .gradients
            .iter()
            .map(|g| format!("{}", g[axis]))
            .collect::<Vec<_>>()
            .join(" ");
        bvecs_text.push_str(&row);
        bvecs_text.push('\n');
    }
    fs::write(bvals_path, bvals_text).map_err(|e| Error::io(bvals_path, e))?;
    fs::write(bvecs_path, bvecs_text).map_err(|e| Error::io(bvecs_path, e))?;
    Ok(())
}
