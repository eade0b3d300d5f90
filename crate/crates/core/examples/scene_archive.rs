//! Generates labeled, unlabeled and validation splits and round-trips them
//! through the on-disk scene archive.
//!
//! Usage: `cargo run --release --example scene_archive [dir]`

use std::path::PathBuf;

use tokenmix::data::{make_splits, read_archive, write_archive, SplitSpec};

fn main() -> tokenmix::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/scene_archive".into()));
    let spec = SplitSpec {
        n_labeled: 4,
        n_unlabeled: 16,
        n_val: 8,
        seed: 11,
    };
    let splits = make_splits(&spec, 32, 4)?;
    write_archive(&dir, &splits, &spec, 4)?;
    let (back, back_spec) = read_archive(&dir)?;
    println!("wrote {} scenes to {}", 4 + 16 + 8, dir.display());
    println!(
        "read back {}/{}/{} scenes, identical: {}",
        back.labeled.len(),
        back.unlabeled.len(),
        back.val.len(),
        back == splits && back_spec == spec
    );
    let hist = splits.labeled[0].label.histogram(4);
    println!("first labeled scene class histogram: {hist:?}");
    Ok(())
}
