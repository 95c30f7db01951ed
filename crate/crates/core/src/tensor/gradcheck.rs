use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms. A central
/// difference at `eps = 1e-5` on an O(1) loss carries roughly `1e-11` of
/// roundoff, which would otherwise dominate the relative error of entries
/// whose exact gradient cancels to zero.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose ±eps probes crossed a relu/abs/clamp/max kink.
    pub skipped_kinks: usize,
}

/// Checks every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let selection: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    grad_check_selected(f, inputs, &selection, eps)
}

/// Checks only the listed `(input index, element index)` entries.
///
/// `f` must build a scalar loss from leaves bound to `inputs` (in order). An
/// entry is excluded when either probe changes the tape's kink signature,
/// which means a relu/abs/clamp/max branch lies within `eps` of the point.
pub fn grad_check_selected<F>(f: F, inputs: &[Tensor], selection: &[(usize, usize)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::usage(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let run = |values: &[Tensor]| -> Result<(f64, u64, Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::usage("grad_check closure must return a scalar"));
        }
        let v = tape.value(loss).data()[0];
        Ok((v, tape.kink_signature(), tape, vars, loss))
    };

    let (_, base_sig, tape, vars, loss) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for &(i, e) in selection {
        let orig = inputs[i].data()[e];
        probe[i].data_mut()[e] = orig + eps;
        let (fp, sp, ..) = run(&probe)?;
        probe[i].data_mut()[e] = orig - eps;
        let (fm, sm, ..) = run(&probe)?;
        probe[i].data_mut()[e] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i][e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, e));
        }
    }
    Ok(report)
}
