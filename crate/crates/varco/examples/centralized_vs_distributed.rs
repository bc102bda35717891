//! Show that lossless distributed training reproduces the centralized
//! trajectory exactly, that compressed training does not, and that the
//! communication ledger matches its closed form.
//!
//! ```bash
//! cargo run --example centralized_vs_distributed
//! ```

use varco::codec::{Codec, MasterKey};
use varco::graph::{build_gso, synth_sbm, GsoKind};
use varco::model::{
    cross_entropy_loss, model_backward, model_forward, sgd_step, LossKind, ModelParams,
    Nonlinearity,
};
use varco::partition::partition_random;
use varco::runtime::{
    expected_forward_floats, ExecMode, RuntimeConfig, Trainer, Transport,
};
use varco::sched::SchedulerSpec;

fn main() -> varco::Result<()> {
    let g = synth_sbm(200, 4, 0.08, 0.01, 8, 0.6, 11)?;
    let gso = build_gso(&g, GsoKind::MeanNeighbor);
    let p = partition_random(&g, 4, 3)?;
    let init = ModelParams::init_uniform(vec![8, 16, 4], 2, 5)?;
    let eta = 0.3;
    let epochs = 15;

    let run = |ratio: f64| -> varco::Result<(Vec<f64>, ModelParams, u64)> {
        let cfg = RuntimeConfig {
            nonlinearity: Nonlinearity::Relu,
            loss: LossKind::CrossEntropy,
            eta,
            no_comm: false,
            exec: ExecMode::Sequential,
            transport: Transport::Memory,
        };
        let mut trainer = Trainer::new(
            &g,
            &p,
            &gso,
            init.clone(),
            SchedulerSpec::fixed(ratio, epochs),
            Codec::new(MasterKey::from_u64(2)),
            cfg,
        )?;
        let mut losses = Vec::new();
        for t in 0..epochs {
            losses.push(trainer.run_epoch(t)?.train_loss);
        }
        let fwd = trainer.ledger().forward_floats;
        Ok((losses, trainer.params().clone(), fwd))
    };

    // centralized oracle
    let mut central = init.clone();
    let mut central_losses = Vec::new();
    for _ in 0..epochs {
        let (logits, tape) = model_forward(g.features(), &gso, &central, Nonlinearity::Relu)?;
        let (loss, dl) = cross_entropy_loss(&logits, g.labels(), g.train_mask(), 1.0)?;
        let grads = model_backward(&tape, &dl, &gso, &central, false)?;
        central = sgd_step(&central, &grads, eta)?;
        central_losses.push(loss);
    }

    let (lossless, params_lossless, fwd1) = run(1.0)?;
    let (compressed, _, fwd8) = run(8.0)?;

    println!("epoch  centralized      distributed r=1  distributed r=8");
    for t in 0..epochs {
        println!(
            "{t:>5}  {:<15.12} {:<16.12} {:<15.12}",
            central_losses[t], lossless[t], compressed[t]
        );
    }
    let max_rel: f64 = central_losses
        .iter()
        .zip(&lossless)
        .map(|(a, b)| (a - b).abs() / a)
        .fold(0.0, f64::max)
        .max(params_lossless.max_abs_diff(&central));
    println!("\nlossless matches centralized to {max_rel:.2e}; compression visibly deviates.");

    let closed1 = epochs as u64 * expected_forward_floats(&p, &[8, 16, 4], 2, 1.0);
    let closed8 = epochs as u64 * expected_forward_floats(&p, &[8, 16, 4], 2, 8.0);
    println!("forward floats r=1: ledger {fwd1}, closed form {closed1}");
    println!("forward floats r=8: ledger {fwd8}, closed form {closed8}");
    Ok(())
}
