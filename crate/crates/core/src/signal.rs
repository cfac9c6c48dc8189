//! Diffusion signal forward models: single tensor, convex multi-tensor
//! mixtures, and Rician noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{frame_from_first_axis, Mat3, Vec3};
use crate::protocol::AcquisitionProtocol;

/// Reference eigenvalues (mm^2/s) measured in the corpus callosum,
/// shared by every simulated tensor.
pub const REFERENCE_LAMBDAS: [f64; 3] = [1.4e-3, 2.9e-4, 2.9e-4];

/// Axially parameterized diffusion tensor: descending eigenvalues plus
/// the principal diffusion direction.
#[derive(Debug, Clone, Copy)]
pub struct TensorSpec {
    pub lambdas: [f64; 3],
    pub pdd: Vec3,
}

impl TensorSpec {
    pub fn new(lambdas: [f64; 3], pdd: Vec3) -> Result<Self> {
        if lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config(format!("eigenvalues {lambdas:?} must be strictly positive")));
        }
        if lambdas[0] < lambdas[1] || lambdas[1] < lambdas[2] {
            return Err(Error::Config(format!("eigenvalues {lambdas:?} must be non-increasing")));
        }
        if (pdd.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pdd norm {} is not 1", pdd.norm())));
        }
        Ok(TensorSpec { lambdas, pdd })
    }
}

/// D = R diag(lambda) R' with the first frame axis along the pdd.
pub fn tensor_matrix(spec: &TensorSpec) -> Mat3 {
    let [l1, l2, l3] = spec.lambdas;
    let p = spec.pdd;
    if l2 == l3 {
        // Axially symmetric shortcut: (l1 - l2) p p' + l2 I.
        let mut m = Mat3::zeros();
        let d = l1 - l2;
        let pa = p.to_array();
        for r in 0..3 {
            for c in 0..3 {
                let base = if r == c { l2 } else { 0.0 };
                m.set(r, c, base + d * pa[r] * pa[c]);
            }
        }
        m
    } else {
        let r = frame_from_first_axis(p);
        let mut scaled = Mat3::zeros();
        for (i, &l) in spec.lambdas.iter().enumerate() {
            scaled.set(i, i, l);
        }
        r.mul_mat(&scaled).mul_mat(&r.transpose())
    }
}

/// Mixture of up to three tensors sharing one set of eigenvalues.
#[derive(Debug, Clone)]
pub struct FiberConfig {
    pub alphas: Vec<f64>,
    pub pdds: Vec<Vec3>,
}

impl FiberConfig {
    pub fn new(alphas: Vec<f64>, pdds: Vec<Vec3>) -> Result<Self> {
        let t = alphas.len();
        if t == 0 || t > 3 || pdds.len() != t {
            return Err(Error::Config(format!(
                "need 1..=3 matched fractions and directions, got {t} and {}",
                pdds.len()
            )));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("fractions sum to {sum}, expected 1")));
        }
        if alphas.iter().any(|&a| a <= 0.1) {
            return Err(Error::Config(format!("every fraction must exceed 0.1, got {alphas:?}")));
        }
        if alphas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("fractions must be non-decreasing, got {alphas:?}")));
        }
        for (i, p) in pdds.iter().enumerate() {
            if (p.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("direction {i} has norm {}", p.norm())));
            }
        }
        Ok(FiberConfig { alphas, pdds })
    }

    pub fn t(&self) -> usize {
        self.alphas.len()
    }
}

/// S_i = s0 * exp(-b_i * g_i' D g_i).
pub fn single_tensor_signal(proto: &AcquisitionProtocol, spec: &TensorSpec, s0: f64) -> Vec<f64> {
    let d = tensor_matrix(spec);
    proto
        .bvalues
        .iter()
        .zip(&proto.gradients)
        .map(|(&b, g)| s0 * (-b * d.quad_form(Vec3::from_array(*g))).exp())
        .collect()
}

/// Convex combination of single-tensor signals, all sharing `lambdas`.
pub fn multi_tensor_signal(
    proto: &AcquisitionProtocol,
    config: &FiberConfig,
    lambdas: [f64; 3],
    s0: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; proto.n()];
    for (&alpha, &pdd) in config.alphas.iter().zip(&config.pdds) {
        let spec = TensorSpec::new(lambdas, pdd)?;
        let part = single_tensor_signal(proto, &spec, s0);
        for (o, p) in out.iter_mut().zip(part) {
            *o += alpha * p;
        }
    }
    Ok(out)
}

/// Rician perturbation: sqrt((S + e1)^2 + e2^2) with e ~ N(0, sigma^2),
/// sigma = reference_amplitude / snr.
pub fn add_rician_noise<R: Rng + ?Sized>(
    signal: &[f64],
    snr: f64,
    reference_amplitude: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(snr > 0.0) {
        return Err(Error::Config(format!("snr must be positive, got {snr}")));
    }
    let sigma = reference_amplitude / snr;
    Ok(signal
        .iter()
        .map(|&s| {
            let e1: f64 = StandardNormal.sample(rng);
            let e2: f64 = StandardNormal.sample(rng);
            let re = s + e1 * sigma;
            let im = e2 * sigma;
            (re * re + im * im).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shell_protocol(b: f64, dirs: &[[f64; 3]]) -> AcquisitionProtocol {
        let gradients: Vec<[f64; 3]> = dirs
            .iter()
            .map(|g| {
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                [g[0] / n, g[1] / n, g[2] / n]
            })
            .collect();
        let bvalues = vec![b; dirs.len()];
        AcquisitionProtocol::new(gradients, bvalues).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = crate::geom::sample_gaussian3(rng, 1.0);
            if let Some(u) = v.normalized(1e-9) {
                return u;
            }
        }
    }

    #[test]
    fn isotropic_tensor_is_scaled_identity() {
        let spec = TensorSpec::new([1e-3, 1e-3, 1e-3], Vec3::new(0.6, 0.8, 0.0)).unwrap();
        let d = tensor_matrix(&spec);
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1e-3 } else { 0.0 };
                assert_relative_eq!(d.get(r, c), want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reference_tensor_along_x_is_diagonal() {
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let d = tensor_matrix(&spec);
        assert_relative_eq!(d.get(0, 0), 1.4e-3, epsilon = 1e-15);
        assert_relative_eq!(d.get(1, 1), 2.9e-4, epsilon = 1e-15);
        assert_relative_eq!(d.get(2, 2), 2.9e-4, epsilon = 1e-15);
        assert_relative_eq!(d.get(0, 1), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_eigenstructure_matches_generic_eigensolver() {
        // Oracle: nalgebra's symmetric eigensolver, independent of the
        // frame construction used in tensor_matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let pdd = random_unit(&mut rng);
            let l1 = 1e-3 + rng.gen::<f64>() * 1e-3;
            let l2 = 1e-4 + rng.gen::<f64>() * (l1 - 1e-4) * 0.5;
            let l3 = if trial % 2 == 0 { l2 } else { 1e-5 + rng.gen::<f64>() * (l2 - 1e-5) };
            let spec = TensorSpec::new([l1, l2, l3], pdd).unwrap();
            let d = tensor_matrix(&spec);

            let m = nalgebra::Matrix3::from_row_slice(&d.0);
            let eig = nalgebra::SymmetricEigen::new(m);
            let mut pairs: Vec<(f64, nalgebra::Vector3<f64>)> = (0..3)
                .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
                .collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

            for (got, want) in pairs.iter().map(|p| p.0).zip(spec.lambdas) {
                assert_relative_eq!(got, want, epsilon = 1e-12);
            }
            let principal = pairs[0].1;
            let dot = (principal[0] * pdd.x + principal[1] * pdd.y + principal[2] * pdd.z).abs();
            assert!(dot > 1.0 - 1e-9, "principal eigenvector misaligned: |dot| = {dot}");
        }
    }

    #[test]
    fn parallel_gradient_b1000_reference_decay() {
        let proto = shell_protocol(1000.0, &[[1.0, 0.0, 0.0]]);
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let s = single_tensor_signal(&proto, &spec, 1.0);
        assert_relative_eq!(s[0], (-1.4f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn b0_returns_s0_exactly() {
        let proto = AcquisitionProtocol::new(vec![[0.0; 3]], vec![0.0]).unwrap();
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let s = single_tensor_signal(&proto, &spec, 123.0);
        assert_eq!(s[0], 123.0);
    }

    #[test]
    fn orthogonal_gradient_uses_radial_eigenvalue() {
        let proto = shell_protocol(2000.0, &[[0.0, 1.0, 0.0]]);
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let s = single_tensor_signal(&proto, &spec, 1.0);
        assert_relative_eq!(s[0], (-0.58f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn signal_decreases_with_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_unit(&mut rng).to_array();
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, random_unit(&mut rng)).unwrap();
        let mut last = f64::INFINITY;
        for b in [0.0, 500.0, 1000.0, 2000.0, 3000.0] {
            let proto = AcquisitionProtocol::new(vec![g], vec![b]).unwrap();
            let s = single_tensor_signal(&proto, &spec, 1.0)[0];
            assert!(s < last, "signal must strictly decrease with b");
            last = s;
        }
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dirs: Vec<[f64; 3]> = (0..32).map(|_| random_unit(&mut rng).to_array()).collect();
        let proto = shell_protocol(2000.0, &dirs);
        for _ in 0..20 {
            let rot = crate::geom::Quat::random_uniform(&mut rng).to_matrix();
            let pdds = vec![random_unit(&mut rng), random_unit(&mut rng)];
            let config = FiberConfig::new(vec![0.4, 0.6], pdds.clone()).unwrap();
            let base = multi_tensor_signal(&proto, &config, REFERENCE_LAMBDAS, 1.0).unwrap();

            let rot_dirs: Vec<[f64; 3]> =
                dirs.iter().map(|g| rot.mul_vec(Vec3::from_array(*g)).to_array()).collect();
            let rot_proto = shell_protocol(2000.0, &rot_dirs);
            let rot_pdds: Vec<Vec3> = pdds
                .iter()
                .map(|p| rot.mul_vec(*p).normalized(1e-12).unwrap())
                .collect();
            let rot_config = FiberConfig::new(vec![0.4, 0.6], rot_pdds).unwrap();
            let rotated =
                multi_tensor_signal(&rot_proto, &rot_config, REFERENCE_LAMBDAS, 1.0).unwrap();
            for (a, b) in base.iter().zip(rotated) {
                assert_relative_eq!(a, &b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn mixture_reduces_to_single_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dirs: Vec<[f64; 3]> = (0..16).map(|_| random_unit(&mut rng).to_array()).collect();
        let proto = shell_protocol(2000.0, &dirs);
        let pdd = random_unit(&mut rng);
        let config = FiberConfig::new(vec![1.0], vec![pdd]).unwrap();
        let spec = TensorSpec::new(REFERENCE_LAMBDAS, pdd).unwrap();
        let a = multi_tensor_signal(&proto, &config, REFERENCE_LAMBDAS, 1.0).unwrap();
        let b = single_tensor_signal(&proto, &spec, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn equal_mixture_is_mean_of_components() {
        let proto = shell_protocol(2000.0, &[[1.0, 0.0, 0.0], [0.0, 0.3, 0.9]]);
        let p1 = Vec3::new(1.0, 0.0, 0.0);
        let p2 = Vec3::new(0.0, 1.0, 0.0);
        let config = FiberConfig::new(vec![0.5, 0.5], vec![p1, p2]).unwrap();
        let mix = multi_tensor_signal(&proto, &config, REFERENCE_LAMBDAS, 1.0).unwrap();
        let s1 = single_tensor_signal(&proto, &TensorSpec::new(REFERENCE_LAMBDAS, p1).unwrap(), 1.0);
        let s2 = single_tensor_signal(&proto, &TensorSpec::new(REFERENCE_LAMBDAS, p2).unwrap(), 1.0);
        for i in 0..proto.n() {
            assert_relative_eq!(mix[i], 0.5 * (s1[i] + s2[i]), epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_stays_within_component_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dirs: Vec<[f64; 3]> = (0..24).map(|_| random_unit(&mut rng).to_array()).collect();
        let proto = shell_protocol(2000.0, &dirs);
        for _ in 0..50 {
            let pdds = vec![random_unit(&mut rng), random_unit(&mut rng), random_unit(&mut rng)];
            let config = FiberConfig::new(vec![0.2, 0.3, 0.5], vec![pdds[0], pdds[1], pdds[2]]).unwrap();
            let mix = multi_tensor_signal(&proto, &config, REFERENCE_LAMBDAS, 1.0).unwrap();
            let comps: Vec<Vec<f64>> = pdds
                .iter()
                .map(|&p| {
                    single_tensor_signal(&proto, &TensorSpec::new(REFERENCE_LAMBDAS, p).unwrap(), 1.0)
                })
                .collect();
            for i in 0..proto.n() {
                let lo = comps.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
                let hi = comps.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
                assert!(mix[i] >= lo - 1e-12 && mix[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn config_constraints_enforced() {
        let p = Vec3::new(1.0, 0.0, 0.0);
        assert!(FiberConfig::new(vec![0.5, 0.5], vec![p, p]).is_ok());
        assert!(FiberConfig::new(vec![0.6, 0.4], vec![p, p]).is_err(), "decreasing fractions");
        assert!(FiberConfig::new(vec![0.05, 0.95], vec![p, p]).is_err(), "fraction below floor");
        assert!(FiberConfig::new(vec![0.5, 0.6], vec![p, p]).is_err(), "sum above 1");
        assert!(FiberConfig::new(vec![], vec![]).is_err(), "empty mixture");
    }

    #[test]
    fn infinite_snr_leaves_signal_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = vec![0.9, 0.5, 0.1];
        let noisy = add_rician_noise(&s, f64::INFINITY, 1.0, &mut rng).unwrap();
        assert_eq!(noisy, s);
    }

    #[test]
    fn zero_signal_noise_matches_rayleigh_mean() {
        // Monte-Carlo oracle: with S = 0 the output is Rayleigh(sigma),
        // whose mean is sigma * sqrt(pi/2).
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let snr = 20.0;
        let sigma = 1.0 / snr;
        let n = 1_000_000usize;
        let zeros = vec![0.0; 1000];
        let mut sum = 0.0;
        for _ in 0..n / 1000 {
            let noisy = add_rician_noise(&zeros, snr, 1.0, &mut rng).unwrap();
            sum += noisy.iter().sum::<f64>();
        }
        let mean = sum / n as f64;
        let want = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - want).abs() / want < 0.01, "mean {mean} vs rayleigh {want}");
    }

    #[test]
    fn noise_output_nonnegative_and_snr_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = vec![0.01; 256];
        let noisy = add_rician_noise(&s, 5.0, 1.0, &mut rng).unwrap();
        assert!(noisy.iter().all(|&v| v >= 0.0));
        assert!(add_rician_noise(&s, 0.0, 1.0, &mut rng).is_err());
        assert!(add_rician_noise(&s, -3.0, 1.0, &mut rng).is_err());
    }
}
