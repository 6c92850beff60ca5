//! Trains the small conv net on the synthetic open-set task with and
//! without the Almost Right term, then compares test AUROC and the
//! geometry of the first-layer kernels.
//!
//! `cargo run --release --example train_openset -- [seed] [epochs] [image_size]`

use near_ortho::data::{generate_openset_task, TaskConfig};
use near_ortho::nn::{train, LossConfig, Network, SgdConfig};
use near_ortho::tensor::Rng;

fn main() -> near_ortho::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let seed = args.first().copied().unwrap_or(0) as u64;
    let epochs = args.get(1).copied().unwrap_or(3);
    let image_size = args.get(2).copied().unwrap_or(32);

    let task = TaskConfig { image_size, seed, ..TaskConfig::default() };
    let ds = generate_openset_task(&task)?;
    let sgd = SgdConfig { epochs, ..SgdConfig::desk() };

    println!("{:<14} {:>8} {:>8} {:>10} {:>8}", "loss", "test", "best_ep", "mean|cos|", "secs");
    for (name, loss) in [
        ("cross_entropy", LossConfig::cross_entropy()),
        ("ar alpha=1.0", LossConfig::almost_right(1.0)),
        ("ar alpha=0.5", LossConfig::almost_right(0.5)),
    ] {
        let mut rng = Rng::new(seed);
        let mut net = Network::small_conv_net(ds.input_shape, 2, loss.first_activation)?;
        net.init_fan_in(&mut rng.derive("init"));
        let out = train(net, &ds, &loss, &sgd, &mut rng)?;
        let r = &out.report;
        println!(
            "{:<14} {:>8.4} {:>8} {:>10.4} {:>8.1}",
            name, r.test_metric, r.best_epoch, r.geometry_best.mean_abs_cos, r.wall_time_secs
        );
    }
    Ok(())
}
