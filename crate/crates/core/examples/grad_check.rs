//! Finite-difference checks for every differentiable op and for the
//! model end to end.

use rat_core::gradcheck::{model_suite, op_suite};

fn main() -> anyhow::Result<()> {
    let mut failed = 0;
    for r in op_suite(0)?.into_iter().chain(model_suite(0)?) {
        println!(
            "{:<28} {:.3e} (tol {:.0e})",
            r.name, r.max_rel_err, r.tolerance
        );
        failed += usize::from(!r.passed());
    }
    anyhow::ensure!(failed == 0, "{failed} checks failed");
    Ok(())
}
