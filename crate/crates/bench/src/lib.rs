//! Shared fixtures for the benchmark suite: a plausible acquisition
//! protocol and clean multi-fiber signals at full problem size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fodkit::geom::Vec3;
use fodkit::protocol::AcquisitionProtocol;
use fodkit::signal::{multi_tensor_signal, FiberConfig, REFERENCE_LAMBDAS};
use fodkit::sphere::random_unit_vector;

/// Uniform random gradient set at a single shell.
pub fn shell_protocol(directions: usize, bvalue: f64, seed: u64) -> AcquisitionProtocol {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gradients = Vec::with_capacity(directions);
    let mut bvalues = Vec::with_capacity(directions);
    for _ in 0..directions {
        gradients.push(random_unit_vector(&mut rng).to_array());
        bvalues.push(bvalue);
    }
    AcquisitionProtocol::new(gradients, bvalues).expect("synthetic protocol is valid")
}

/// Equal-fraction two-fiber crossing in the xy-plane at the given
/// separation.
pub fn crossing_signal(proto: &AcquisitionProtocol, angle_deg: f64) -> Vec<f64> {
    let a = angle_deg.to_radians();
    let config = FiberConfig::new(
        vec![0.5, 0.5],
        vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(a.cos(), a.sin(), 0.0)],
    )
    .expect("crossing geometry is valid");
    multi_tensor_signal(proto, &config, REFERENCE_LAMBDAS, 1.0).expect("signal simulation works")
}
