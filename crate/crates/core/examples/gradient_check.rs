//! Compares backpropagation with central differences on a few MNIST images.
//!
//! cargo run --release --example gradient_check

use p2pl::config::{DATA_DIR_ENV, DEFAULT_DATA_DIR};
use p2pl::data;
use p2pl::nn::{self, gradcheck};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::var(DATA_DIR_ENV).unwrap_or_else(|_| DEFAULT_DATA_DIR.to_string());
    let (train, _) = data::load_mnist_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = nn::init_params(42);
    let batch = train.gather(&[0, 1, 2, 3]);
    let sizes = params.sizes();
    let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    let (loss, g64) = nn::loss_and_grad_f64(&sizes, &w, &batch)?;
    let g32 = nn::loss_and_grad(&params, &batch)?.grad;
    println!("loss {loss:.6} over {} parameters", params.len());
    println!("{:>7} {:>14} {:>14} {:>14} {:>10}", "coord", "f64", "f32", "central diff", "rel err");
    let mut shown = 0;
    while shown < 12 {
        let c = rng.gen_range(0..params.len());
        // border pixels are always zero, so most first-layer weights have no gradient
        if g64[c] == 0.0 {
            continue;
        }
        shown += 1;
        let e = gradcheck::central_differences(&sizes, &w, &batch, &[c], 1e-3)[0];
        let note = if e.crosses_kink { "  (ReLU kink)" } else { "" };
        println!(
            "{c:>7} {:>14.6e} {:>14.6e} {:>14.6e} {:>10.2e}{note}",
            g64[c],
            g32[c],
            e.value,
            gradcheck::relative_error(g64[c], e.value)
        );
    }
    Ok(())
}
