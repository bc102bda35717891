//! Desk-scale comparison of the four training arms on one synthetic graph:
//! full communication, no communication, fixed compression, and the
//! decreasing-ratio schedule. Prints the final table and the accuracy each
//! arm achieves per communication budget.
//!
//! ```bash
//! cargo run --release --example train_arms
//! ```

use varco::harness::{
    accuracy_at_budgets, build_graph, build_partition, run_training, Arm, ArmRun, build_report,
    DatasetSpec, TrainConfig,
};

fn main() -> varco::Result<()> {
    let base = {
        let mut cfg = TrainConfig::default();
        cfg.dataset = DatasetSpec::Sbm {
            n: 400,
            classes: 4,
            p_in: 0.05,
            p_out: 0.005,
            feat_dim: 16,
            noise: 1.2,
            seed: 8,
        };
        cfg.partition.workers = 4;
        cfg.model.hidden = 16;
        cfg.epochs = 150;
        cfg.eta = 0.5;
        cfg
    };
    let g = build_graph(&base)?;
    let p = build_partition(&base, &g)?;
    println!(
        "graph: {} nodes, {} undirected edges; 4 workers, random partition",
        g.num_nodes(),
        g.num_directed_edges() / 2
    );

    let arms: Vec<(&str, Arm, f64)> = vec![
        ("full", Arm::Full, 128.0),
        ("no-comm", Arm::NoComm, 128.0),
        ("fixed-r4", Arm::Fixed, 4.0),
        ("varco", Arm::Varco, 128.0),
    ];
    let mut runs = Vec::new();
    for (name, arm, c_max) in &arms {
        let mut cfg = base.clone();
        cfg.arm = *arm;
        cfg.c_max = *c_max;
        let (records, _) = run_training(&cfg, &g, &p)?;
        runs.push(ArmRun {
            name: name.to_string(),
            records,
        });
    }

    println!("\narm       final_loss  val_acc  test_acc  total_floats");
    for r in &runs {
        let last = r.records.last().unwrap();
        println!(
            "{:<9} {:>10.4}  {:>7.3}  {:>8.3}  {:>12}",
            r.name, last.train_loss, last.val_acc, last.test_acc, last.cum_floats
        );
    }

    let report = build_report(&runs, 12)?;
    println!("\ntest accuracy achieved within a budget (floats communicated):");
    print!("{:>12}", "budget");
    for s in &report.summaries {
        print!("{:>10}", s.name);
    }
    println!();
    for (i, b) in report.budgets.iter().enumerate() {
        print!("{:>12.2e}", b);
        for curve in &report.curves {
            print!("{:>10.3}", curve[i]);
        }
        println!();
    }

    let varco_curve = accuracy_at_budgets(&runs[3].records, &report.budgets);
    let full_curve = accuracy_at_budgets(&runs[0].records, &report.budgets);
    let wins = varco_curve
        .iter()
        .zip(&full_curve)
        .filter(|(a, b)| a >= b)
        .count();
    println!(
        "\nthe decreasing schedule matches or beats full communication at {wins}/{} budgets",
        report.budgets.len()
    );
    Ok(())
}
