//! AUROC with ties, its invariance to monotone score transforms, and
//! cross-seed aggregation.

use near_ortho::eval::{auroc, MeanStd};

fn main() -> near_ortho::Result<()> {
    let labels = [false, false, true, true];
    for (name, scores) in [
        ("perfect", [0.1, 0.2, 0.8, 0.9]),
        ("inverted", [0.9, 0.8, 0.2, 0.1]),
        ("all tied", [0.5; 4]),
        ("one tie", [0.1, 0.5, 0.5, 0.9]),
    ] {
        println!("{name:<9} {scores:?} -> {:.3}", auroc(&scores, &labels)?);
    }

    let scores = [0.3, -1.2, 0.7, 2.5, 0.7, 0.1];
    let labels = [false, false, true, true, false, true];
    let squashed: Vec<f64> = scores.iter().map(|s: &f64| 1.0 / (1.0 + (-3.0 * s).exp())).collect();
    println!("\nraw {:.4}, sigmoid(3s) {:.4}", auroc(&scores, &labels)?, auroc(&squashed, &labels)?);

    let per_seed = [0.91, 0.88, 0.93, 0.90, 0.89];
    let m = MeanStd::of(&per_seed)?;
    println!("5 seeds: {:.4} ± {:.4} (sample std)", m.mean, m.std);
    Ok(())
}
