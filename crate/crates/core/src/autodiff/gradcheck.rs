use super::{ParamStore, Tape, Tensor, Var};
use crate::Result;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probes crossed a relu kink or changed a pooling winner.
    pub skipped_kinks: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between reverse-mode and central-difference gradients of f at x.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Checks every trainable parameter of `store` through the scalar built by `f`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_into(&mut grads);

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok((t.value(o).item(), t.kink_signature()))
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let (up, s_up) = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let (down, s_down) = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            if s_up != base_sig || s_down != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (up - down) / (2.0 * eps);
            report.max_rel_error = report
                .max_rel_error
                .max(rel_error(grads.grad(id).data()[i], numeric));
        }
    }
    Ok(report)
}
