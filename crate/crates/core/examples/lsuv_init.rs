//! LSUV initialization of the small conv net: per-layer orthonormality of
//! the draw, rescaling iterations and final output variance.

use near_ortho::nn::{Activation, Network};
use near_ortho::ortho::{lsuv_init, output_variance, LSUV_MAX_ITERS, LSUV_TOL_VAR};
use near_ortho::tensor::{gaussian, Rng};

fn main() -> near_ortho::Result<()> {
    let mut rng = Rng::new(3);
    let probe = gaussian(&mut rng, vec![20, 1, 32, 32], 0.0, 1.0)?;

    let mut fan_in = Network::small_conv_net([1, 32, 32], 2, Activation::Relu)?;
    fan_in.init_fan_in(&mut rng.derive("fan-in"));
    let mut net = Network::small_conv_net([1, 32, 32], 2, Activation::Relu)?;
    let report = lsuv_init(&mut net, &probe, LSUV_TOL_VAR, LSUV_MAX_ITERS, &mut rng.derive("lsuv"))?;

    println!("{:>5} {:>14} {:>10} {:>10} {:>12}", "layer", "orth. error", "rescales", "variance", "fan-in var");
    for l in &report.layers {
        println!(
            "{:>5} {:>14.2e} {:>10} {:>10.4} {:>12.4}",
            l.layer,
            l.orthonormality_error,
            l.iterations,
            l.variance,
            output_variance(&fan_in, &probe, l.layer)?
        );
    }
    Ok(())
}
