//! Solves a small masked entropic transport problem and shows how the plan
//! sharpens as the regularization shrinks.

use conesep::numeric::Matrix;
use conesep::ot::{format_csv_matrix, sinkhorn, MaskedCost};

fn main() -> conesep::Result<()> {
    // Three queries against three targets and three negatives. Row i may not
    // use its own target (noisy) or its own negative (clean).
    let cost = Matrix::from_rows(&[
        vec![0.2, 0.9, 1.1, 0.7, 1.2, 1.0],
        vec![1.0, 0.3, 0.8, 1.1, 0.6, 0.9],
        vec![0.9, 1.2, 0.4, 1.0, 0.8, 0.5],
    ])?;
    let mask = Matrix::from_rows(&[
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ])?;
    let problem = MaskedCost::new(cost, mask)?;

    for eps in [1.0, 0.1, 0.01] {
        let plan = sinkhorn(&problem, eps, 1000, 1e-9)?;
        let s = plan.summary(&problem, eps);
        println!(
            "eps {eps:<5} iterations {:>4} residual {:.1e} entropy {:.4} objective {:.4}",
            s.iterations,
            s.residual,
            plan.entropy(),
            s.objective
        );
        if eps == 0.1 {
            print!("{}", format_csv_matrix(&plan.plan));
        }
    }

    let blocked = MaskedCost::new(
        Matrix::zeros(2, 2),
        Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]])?,
    )?;
    match sinkhorn(&blocked, 0.1, 100, 1e-6) {
        Err(e) => println!("fully masked row: {e}"),
        Ok(_) => unreachable!("a fully masked row has no feasible plan"),
    }
    Ok(())
}
