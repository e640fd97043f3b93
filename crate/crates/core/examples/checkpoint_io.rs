//! Saves a model checkpoint, shows its text header, reloads it and checks
//! the round trip, then shows the errors for damaged files.
//!
//! cargo run --example checkpoint_io

use speckle_lab::model::{Checkpoint, Model, ModelConfig, TrainingMeta};

fn main() -> speckle_lab::Result<()> {
    let model = Model::new(ModelConfig::toy(), 42)?;
    let ck = Checkpoint::new(
        model,
        TrainingMeta {
            epoch: 3,
            seed: 42,
            lambda: 1.0,
            learning_rate: 0.01,
        },
    );
    let bytes = ck.to_bytes();
    let header_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
    println!("{}", String::from_utf8_lossy(&bytes[..header_end]));
    println!("({} bytes in total)\n", bytes.len());

    let back = Checkpoint::from_bytes(&bytes)?;
    println!("round trip identical: {}", back == ck);

    match Checkpoint::from_bytes(&bytes[..bytes.len() - 1]) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => println!("truncated file unexpectedly loaded"),
    }
    let mut other = ModelConfig::toy();
    other.hidden_channels = 16;
    match back.ensure_config(&other) {
        Err(e) => println!("config check: {e}"),
        Ok(()) => println!("config check unexpectedly passed"),
    }
    Ok(())
}
