//! Microbenchmark for the inner-loop solve cost (dev aid).

use mvflow::fields::*;
use mvflow::noise::simulate_noise;
use mvflow::rng::CounterRng;
use mvflow::solver::*;
use mvflow::*;
use std::time::Instant;

fn main() {
    // Additive one-particle model, 20 steps.
    let e1 = Manifold::euclidean(1);
    let mu = EmpiricalMeasure::dirac(e1, vec_from(&[0.0])).unwrap();
    let fields = FieldSet::new(
        InteractionField::zero(e1),
        vec![InteractionField::autonomous(e1, MomentMap::Constant { v: vec_from(&[1.0]) })],
    )
    .unwrap();
    let cfg = SolverConfig::heun(0.01).with_stride(20);
    let t0 = Instant::now();
    let n = 20_000;
    for r in 0..n {
        let noise = simulate_noise(1, 0.2, 0.01, 1, r).unwrap();
        let _ = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
    }
    println!("additive 20-step solve: {:.1} us", t0.elapsed().as_secs_f64() / n as f64 * 1e6);

    // Sphere alignment model, 12 particles, 10 steps, 2 noises.
    let m = Manifold::sphere(2);
    let mut rng = CounterRng::new(5, 0);
    let pts = m.sample_uniform(12, &mut rng).unwrap();
    let mu = EmpiricalMeasure::uniform(m, pts).unwrap();
    let fields = FieldSet::new(
        InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 }),
        vec![
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 2, scale: 0.5 }),
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 0, scale: 0.5 }),
        ],
    )
    .unwrap();
    let cfg = SolverConfig::heun(0.02).with_stride(10);
    let t0 = Instant::now();
    let n = 5_000;
    for r in 0..n {
        let noise = simulate_noise(2, 0.2, 0.02, 1, r).unwrap();
        let _ = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
    }
    println!(
        "sphere 10-step 12-particle solve: {:.1} us",
        t0.elapsed().as_secs_f64() / n as f64 * 1e6
    );
}
