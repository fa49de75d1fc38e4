//! Builds a Sylvester flow, pushes base noise through it and checks the
//! change-of-variables density against the inverse map.

use flowgp::flows::{log_base_density, log_q_density, standard_normal_vec, FlowStack, LayerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> flowgp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kinds = [
        LayerKind::Sylvester,
        LayerKind::Radial,
        LayerKind::Sylvester,
        LayerKind::DiagAffine,
    ];
    let stack = FlowStack::with_kinds(4, &kinds, 1.0, &mut rng)?;
    // perturb away from the identity start
    let params: Vec<f64> = stack
        .params()
        .iter()
        .map(|p| p + 0.4 * rng.random_range(-1.0..1.0))
        .collect();
    let stack = stack.with_params(&params)?;
    println!("{} layers, {} parameters", stack.n_layers(), stack.params().len());
    for _ in 0..4 {
        let u = standard_normal_vec(4, &mut rng);
        let s = stack.forward(&u)?;
        let lq = log_q_density(&s.xi, &stack)?;
        println!(
            "xi = {:.4?}  log q = {lq:.6}  (base - log det = {:.6})",
            s.xi,
            log_base_density(&u) - s.log_det
        );
    }
    Ok(())
}
