use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::Bound;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for relative errors, so coordinates whose true
/// derivative is ~0 compare on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode adjoints of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh tape from the bound parameters. With
/// `per_block = Some(k)` at most `k` coordinates of each tensor are probed,
/// chosen with `rng`; `None` probes every coordinate.
pub fn grad_check<F>(
    params: &ParamStore,
    f: F,
    per_block: Option<usize>,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let eval = |p: &ParamStore| {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let out = f(&mut tape, &b);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = f(&mut tape, &bound);
    let grads = tape.backward(out);

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (pi, tensor) in params.tensors().iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = match per_block {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = tensor.data()[c];
            probe.tensors_mut()[pi].data_mut()[c] = orig + FD_STEP;
            let up = eval(&probe);
            probe.tensors_mut()[pi].data_mut()[c] = orig - FD_STEP;
            let down = eval(&probe);
            probe.tensors_mut()[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.params[pi].data()[c];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = params.names()[pi].clone();
                report.worst_index = c;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_at_three() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor2::scalar(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = grad_check(&s, |t, b| t.square(b.get(0)), None, &mut rng);
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor2::scalar(3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // sum(x) through a stop-gradient path: the tape sees a constant.
        let r = grad_check(
            &s,
            |t, b| {
                let v = t.value(b.get(0)).clone();
                let c = t.constant(v);
                let sq = t.square(c);
                t.sum(sq)
            },
            None,
            &mut rng,
        );
        assert!(r.max_rel_err > 0.5);
    }
}
