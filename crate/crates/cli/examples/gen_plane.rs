//! Regenerates `data/plane_r20.bin`: 1500 points of a random 2-plane in R^20.
//!
//! `cargo run -p moesl-cli --example gen_plane`

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use moesl_core::intrinsic_dim::{embedded_cube, write_binary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = embedded_cube(1500, 2, 20, 2024)?;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/plane_r20.bin");
    write_binary(&set, BufWriter::new(File::create(&path)?))?;
    println!("wrote {} points to {}", set.len(), path.display());
    Ok(())
}
