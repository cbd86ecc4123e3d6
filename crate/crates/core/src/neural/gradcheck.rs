//! Central-difference gradient checking against the tape's analytic gradients.

use super::tape::{ParamSet, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` per parameter block.
    pub blocks: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-5;

/// `f` must build a scalar (`1×1`) output from the parameters in `params`.
pub fn grad_check<F>(params: &ParamSet, f: F, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape) -> Var,
{
    let mut grads = params.zero_grads();
    {
        let mut t = Tape::new(params);
        let out = f(&mut t);
        t.backward(out, 1.0, &mut grads);
    }
    let eval = |ps: &ParamSet| {
        let mut t = Tape::new(ps);
        let out = f(&mut t);
        t.scalar(out)
    };
    let mut work = params.clone();
    let mut blocks = Vec::new();
    let mut worst = 0.0f64;
    let ids: Vec<_> = params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let mut block_max = 0.0f64;
        for k in 0..params.get(id).data.len() {
            let orig = work.get(id).data[k];
            work.get_mut(id).data[k] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).data[k] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id).data[k];
            let denom = numeric.abs().max(analytic.abs()).max(DENOM_FLOOR);
            block_max = block_max.max((numeric - analytic).abs() / denom);
        }
        worst = worst.max(block_max);
        blocks.push((name, block_max));
    }
    GradCheckReport { blocks, max_rel_error: worst, passed: worst <= tol }
}
