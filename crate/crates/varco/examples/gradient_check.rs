//! Check the hand-rolled reverse-mode gradients against central finite
//! differences on a small instance.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use varco::graph::{build_gso, synth_sbm, GsoKind};
use varco::model::{
    cross_entropy_loss, model_backward, model_forward, ModelParams, Nonlinearity,
};

fn main() -> varco::Result<()> {
    let g = synth_sbm(10, 2, 0.6, 0.2, 4, 0.3, 3)?;
    let gso = build_gso(&g, GsoKind::MeanNeighbor);
    let params = ModelParams::init_uniform(vec![4, 5, 2], 2, 1)?;
    let rho = Nonlinearity::Tanh;

    let (logits, tape) = model_forward(g.features(), &gso, &params, rho)?;
    let (loss, dlogits) = cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0)?;
    let grads = model_backward(&tape, &dlogits, &gso, &params, false)?;
    println!("loss at init: {loss:.6}");

    let eval = |p: &ModelParams| -> f64 {
        let (logits, _) = model_forward(g.features(), &gso, p, rho).unwrap();
        cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0)
            .unwrap()
            .0
    };

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for l in 0..params.num_layers() {
        for k in 0..params.taps() {
            let h = &params.layer(l)[k];
            for i in 0..h.rows() {
                for j in 0..h.cols() {
                    let mut plus = params.clone();
                    plus.layer_mut(l)[k].set(i, j, h.get(i, j) + step);
                    let mut minus = params.clone();
                    minus.layer_mut(l)[k].set(i, j, h.get(i, j) - step);
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                    let analytic = grads.layers[l][k].get(i, j);
                    let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                    if rel > worst {
                        worst = rel;
                        println!(
                            "  H[{l}][{k}][{i}][{j}]: analytic {analytic:+.8}, finite-diff {fd:+.8}, rel {rel:.2e}"
                        );
                    }
                    count += 1;
                }
            }
        }
    }
    println!("checked {count} coefficients; worst relative error {worst:.2e}");
    Ok(())
}
