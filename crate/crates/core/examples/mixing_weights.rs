//! Prints the data-size weighted mixing and affinity matrices of a few graphs.
//!
//! cargo run --example mixing_weights

use p2pl::topology::{affinity_weights, build_graph, mixing_weights, GraphKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sizes = [600, 300, 900, 150, 450, 600];
    for kind in [GraphKind::Ring, GraphKind::Grid, GraphKind::ErdosRenyi { p: 0.5 }] {
        let g = build_graph(kind, sizes.len(), 7)?;
        let alpha = mixing_weights(&g, &sizes)?.alpha;
        let beta = affinity_weights(&g, &sizes)?.beta;
        println!("{kind}: edges {:?}", g.edges().collect::<Vec<_>>());
        for k in 0..sizes.len() {
            let row = |m: &ndarray::Array2<f64>| {
                m.row(k).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
            };
            println!("  alpha[{k}] {}   beta[{k}] {}", row(&alpha), row(&beta));
        }
    }
    Ok(())
}
