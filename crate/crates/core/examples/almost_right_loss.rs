//! The Almost Right loss on a few hand-made kernel banks, its gradient, and
//! a short descent on the loss alone.

use near_ortho::ortho::{almost_right_grad, almost_right_loss, hard_ortho_loss, KernelBank};
use near_ortho::tensor::{gaussian, Rng, Tensor};

const EPS: f64 = 1e-8;

fn bank(rows: &[Vec<f64>]) -> KernelBank {
    KernelBank::from_rows(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn main() -> near_ortho::Result<()> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let cases = [
        ("identical", bank(&[vec![1.0, 2.0], vec![1.0, 2.0]])),
        ("orthogonal", bank(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])),
        ("e1, e2, diagonal", bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]])),
        ("anti-parallel", bank(&[vec![1.0, -1.0], vec![-1.0, 1.0]])),
    ];
    println!("{:<18} {:>12} {:>12}", "bank", "almost_right", "hard_ortho");
    for (name, kb) in &cases {
        println!("{name:<18} {:>12.6} {:>12.6}", almost_right_loss(kb, EPS), hard_ortho_loss(kb, EPS));
    }

    // Gradient descent on the loss alone drives it to its floor −1/(K−1).
    let mut rng = Rng::new(7);
    let mut kb = KernelBank::from_rows(gaussian(&mut rng, vec![16, 25], 0.0, 0.3)?)?;
    println!("\nK=16, D=25 random bank, lr 0.5");
    for step in 0..=2000 {
        if step % 500 == 0 {
            println!("step {step:>4}: loss {:+.5}", almost_right_loss(&kb, EPS));
        }
        let g = almost_right_grad(&kb, EPS);
        let next: Vec<f64> = kb.rows().data().iter().zip(g.data()).map(|(w, g)| w - 0.5 * g).collect();
        kb = KernelBank::from_rows(Tensor::new(vec![16, 25], next)?)?;
    }
    println!("floor −1/(K−1) = {:+.5}", -1.0 / 15.0);
    Ok(())
}
