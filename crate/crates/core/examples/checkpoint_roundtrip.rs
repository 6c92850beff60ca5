//! Saves a trained network, reloads it and checks that logits are
//! bit-identical; then shows how a corrupted file is rejected.

use near_ortho::nn::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Activation, Network};
use near_ortho::tensor::{gaussian, Rng};

fn main() -> near_ortho::Result<()> {
    let mut rng = Rng::new(11);
    let mut net = Network::small_conv_net([1, 16, 16], 2, Activation::Sigmoid)?;
    net.init_fan_in(&mut rng);
    // Checkpoints store f32; round first so the reload is exact.
    let net = net.rounded_to_f32();

    let path = std::env::temp_dir().join("near-ortho-example.nowt");
    save_checkpoint(&net, &path)?;
    let loaded = load_checkpoint(&path)?;
    let x = gaussian(&mut rng, vec![4, 1, 16, 16], 0.0, 1.0)?;
    let same = net.forward(&x)?.data() == loaded.forward(&x)?.data();
    println!(
        "{} parameters, {} bytes, logits identical after reload: {same}",
        net.param_count(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );

    let mut bytes = Vec::new();
    write_checkpoint(&net, &mut bytes).expect("in-memory write");
    bytes[0] = b'X';
    println!("corrupted magic: {}", read_checkpoint(&bytes).unwrap_err());
    bytes.truncate(40);
    bytes[0] = b'N';
    println!("truncated:       {}", read_checkpoint(&bytes).unwrap_err());
    let _ = std::fs::remove_file(path);
    Ok(())
}
