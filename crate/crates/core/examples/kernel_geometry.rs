//! Geometry diagnostics for three first-layer kernel banks: a fan-in
//! Gaussian draw, a Gram–Schmidt orthonormal bank, and a redundant bank
//! built from two prototypes.

use near_ortho::diagnostics::{summarize, DEFAULT_TAU_DEG};
use near_ortho::ortho::KernelBank;
use near_ortho::tensor::{gaussian, gram_schmidt_rows, Rng, Tensor};

fn show(name: &str, kb: &KernelBank) -> near_ortho::Result<()> {
    let g = summarize(kb, 1e-8, DEFAULT_TAU_DEG)?;
    let spectrum: Vec<String> = g.gram_eigenvalues.iter().take(4).map(|e| format!("{e:.2}")).collect();
    println!(
        "{name:<12} mean|cos| {:.3}  mean cos {:+.3}  angles {:5.1}°..{:5.1}°  near-90° {:>5.1}%  top eigenvalues [{}]",
        g.mean_abs_cos,
        g.mean_signed_cos,
        g.min_angle_deg,
        g.max_angle_deg,
        100.0 * g.frac_near_orthogonal,
        spectrum.join(", ")
    );
    Ok(())
}

fn main() -> near_ortho::Result<()> {
    let mut rng = Rng::new(1);
    let random = gaussian(&mut rng, vec![16, 25], 0.0, (2.0f64 / 25.0).sqrt())?;
    show("random", &KernelBank::from_rows(random.clone())?)?;
    show("orthonormal", &KernelBank::from_rows(gram_schmidt_rows(&random)?)?)?;

    let protos = gaussian(&mut rng, vec![2, 25], 0.0, 1.0)?;
    let noise = gaussian(&mut rng, vec![16, 25], 0.0, 0.1)?;
    let redundant: Vec<f64> = (0..16)
        .flat_map(|i| protos.row(i % 2).iter().zip(noise.row(i)).map(|(p, n)| p + n).collect::<Vec<_>>())
        .collect();
    show("redundant", &KernelBank::from_rows(Tensor::new(vec![16, 25], redundant)?)?)?;
    Ok(())
}
