//! Dataset handling: IDX encoding and parsing, stratified subsets and
//! standardization. Loads MNIST too when given its directory.
//!
//! ```text
//! cargo run --example data_io -- [data/mnist]
//! ```

use std::path::PathBuf;

use efgd::data::{encode_idx, load_idx, load_mnist, Dataset};
use efgd::Tensor;

fn main() -> efgd::Result<()> {
    // IDX stores 8-bit pixels, so images must lie in [0, 1].
    let n = 500;
    let pixels: Vec<f32> = (0..n * 64).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
    let blobs = Dataset::new(Tensor::from_vec(&[n, 1, 8, 8], pixels)?, (0..n).map(|i| i % 10).collect(), 10, "pixels")?;
    println!(
        "{}: {} samples of {:?}, class counts {:?}",
        blobs.split,
        blobs.len(),
        blobs.sample_shape(),
        blobs.class_counts()
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let (images, labels) = encode_idx(&blobs)?;
    let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    std::fs::write(&ip, images).expect("write images");
    std::fs::write(&lp, labels).expect("write labels");
    let back = load_idx(&ip, &lp)?;
    println!("IDX round trip: {} samples, labels equal {}", back.len(), back.labels == blobs.labels);

    let mut train = back.stratified_subset(100, 1)?;
    let norm = train.standardize()?;
    println!("subset class counts {:?}, mean {:.3}, std {:.3}", train.class_counts(), norm.mean[0], norm.std[0]);

    let mnist_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    match load_mnist(&mnist_dir) {
        Ok((mut tr, mut te)) => {
            let norm = tr.standardize()?;
            te.apply_normalization(&norm)?;
            println!(
                "MNIST: {} train, {} test, pixel mean {:.4} std {:.4}",
                tr.len(),
                te.len(),
                norm.mean[0],
                norm.std[0]
            );
        }
        Err(e) => println!("MNIST skipped: {e}"),
    }
    Ok(())
}
