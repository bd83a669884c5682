//! Identifies a hidden actuator plant from step, ramp and chirp responses
//! and compares against uniform random search with the same budget.

use coptact::calibration::median;
use coptact::sysid::{
    bayes_opt_identify, random_search, simulate_actuator, ActuatorParams, ParamBounds, ProbeSequence, SysidConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hidden = ActuatorParams {
        stiffness: 3.2,
        damping: 0.015,
        coulomb_friction: 0.005,
        viscous_friction: 0.008,
        inertia: 1.8e-4,
    };
    let probes = ProbeSequence::standard_suite();
    let refs = probes
        .iter()
        .map(|p| simulate_actuator(&hidden, p, 1e-3))
        .collect::<Result<Vec<_>, _>>()?;
    let bounds = ParamBounds::default();
    let config = SysidConfig { seed: 11, ..SysidConfig::default() };
    let bo = bayes_opt_identify(&refs, &probes, &bounds, &config)?;
    let random = random_search(&refs, &probes, &bounds, 100, 12)?;
    let baseline = median(&random.history.iter().map(|e| e.mse).collect::<Vec<_>>());
    for k in [9, 19, 49, 99] {
        println!("after {:>3} evaluations: best mse {:.3e}", k + 1, bo.history[k].best_so_far);
    }
    println!("random-search median {baseline:.3e}, ratio {:.2e}", bo.best_mse / baseline);
    let (b, h) = (bo.best, hidden);
    println!("Kp/I     {:>10.1} (hidden {:.1})", b.stiffness / b.inertia, h.stiffness / h.inertia);
    println!("(Kd+b)/I {:>10.2} (hidden {:.2})", (b.damping + b.viscous_friction) / b.inertia, (h.damping + h.viscous_friction) / h.inertia);
    println!("c/I      {:>10.2} (hidden {:.2})", b.coulomb_friction / b.inertia, h.coulomb_friction / h.inertia);
    Ok(())
}
