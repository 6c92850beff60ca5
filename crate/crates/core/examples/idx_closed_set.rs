//! Closed-set path: writes a tiny IDX dataset (two classes of 8×8 images),
//! loads it back and trains the small conv net, scoring top-1 accuracy.

use std::fs::File;

use near_ortho::data::{idx_dataset, write_idx_images, write_idx_labels};
use near_ortho::nn::{train, Activation, LossConfig, Network, SgdConfig};
use near_ortho::tensor::Rng;

fn write_split(dir: &std::path::Path, name: &str, n: usize, rng: &mut Rng) -> std::io::Result<()> {
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        // Class 0: horizontal bars; class 1: vertical bars.
        let img: Vec<u8> = (0..64)
            .map(|p| {
                let (r, c) = (p / 8, p % 8);
                let on = if label == 0 { r % 2 == 0 } else { c % 2 == 0 };
                let base = if on { 200.0 } else { 40.0 };
                (base + 30.0 * rng.normal()).clamp(0.0, 255.0) as u8
            })
            .collect();
        images.push(img);
        labels.push(label);
    }
    write_idx_images(&mut File::create(dir.join(format!("{name}-images.idx")))?, &images, 8, 8)?;
    write_idx_labels(&mut File::create(dir.join(format!("{name}-labels.idx")))?, &labels)
}

fn main() -> near_ortho::Result<()> {
    let dir = std::env::temp_dir().join("near-ortho-idx-example");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let mut rng = Rng::new(5);
    write_split(&dir, "train", 120, &mut rng).expect("write train");
    write_split(&dir, "test", 60, &mut rng).expect("write test");

    let ds = idx_dataset(
        &dir.join("train-images.idx"),
        &dir.join("train-labels.idx"),
        &dir.join("test-images.idx"),
        &dir.join("test-labels.idx"),
        0.2,
        0,
    )?;
    println!("train {} / val {} / test {}, {} classes", ds.train.len(), ds.val.len(), ds.test.len(), ds.num_classes);

    let mut net = Network::small_conv_net(ds.input_shape, ds.num_classes, Activation::Relu)?;
    net.init_fan_in(&mut rng);
    let sgd = SgdConfig { lr0: 0.05, epochs: 5, ..SgdConfig::desk() };
    let out = train(net, &ds, &LossConfig::cross_entropy(), &sgd, &mut rng)?;
    for e in &out.report.epochs {
        println!("epoch {:>2}: train loss {:.4}, val accuracy {:.3}", e.epoch, e.train_loss, e.val_metric);
    }
    println!("test accuracy at epoch {}: {:.3}", out.report.best_epoch, out.report.test_metric);
    Ok(())
}
