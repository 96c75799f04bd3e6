//! Central-finite-difference verification of tape gradients.
//!
//! The function under test rebuilds its graph from scratch on every call; the
//! checker first proves the forward pass is bitwise deterministic across two
//! fresh builds, then compares every analytic parameter gradient against
//! (f(θ+h) − f(θ−h)) / 2h elementwise.

use super::{Parameter, Scalar, Tape, Var};
use crate::error::{Result, SfcError};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradient pairs compare absolutely.
    pub floor: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { h: 1e-5, tol: 1e-5, floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Check the gradient of a scalar-valued graph builder w.r.t. every parameter.
pub fn grad_check<T, F>(f: F, params: &[Parameter<T>], opts: &GradCheckOpts) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Parameter<T>]) -> Result<Var>,
{
    let run = |ps: &[Parameter<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let v = f(&mut tape, ps)?;
        let val = tape.value(v);
        if val.len() != 1 {
            return Err(SfcError::shape("grad_check", format!("loss shape {:?}", tape.shape(v))));
        }
        Ok(val[0])
    };

    let l1 = run(params)?;
    let l2 = run(params)?;
    if l1.as_f64().to_bits() != l2.as_f64().to_bits() {
        return Err(SfcError::Determinism(format!(
            "two identical forward passes disagree: {} vs {}",
            l1.as_f64(),
            l2.as_f64()
        )));
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let h = opts.h;
    let mut work: Vec<Parameter<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for pi in 0..params.len() {
        let name = params[pi].name.clone();
        let analytic = grads
            .get(&name)
            .ok_or_else(|| SfcError::Determinism(format!("parameter {name} was never bound")))?
            .clone();
        let mut max_rel: f64 = 0.0;
        for i in 0..params[pi].numel() {
            let orig = work[pi].value.data()[i];
            work[pi].value.data_mut()[i] = orig + T::f(h);
            let lp = run(&work)?.as_f64();
            work[pi].value.data_mut()[i] = orig - T::f(h);
            let lm = run(&work)?.as_f64();
            work[pi].value.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        out.push(ParamCheck { name, max_rel_err: max_rel, pass: max_rel <= opts.tol });
    }
    Ok(GradCheckReport { max_rel_err: overall, pass: out.iter().all(|p| p.pass), params: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn accepts_a_correct_gradient() {
        let p = Parameter::new("x", Tensor::from_vec(&[3], vec![0.5f64, -1.2, 2.0]).unwrap());
        let report = grad_check(
            |tape, ps| {
                let x = tape.param(&ps[0])?;
                let y = tape.tanh(x)?;
                let z = tape.mul(y, x)?;
                tape.sum_all(z)
            },
            &[p],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn rejects_a_deliberately_wrong_gradient() {
        // Loss uses x^2 but we compare against the gradient of a *different*
        // function by scaling the analytic side: f = sum(3 * x * x) checked
        // against a graph computing sum(x * x); the checker must flag it.
        let p = Parameter::new("x", Tensor::from_vec(&[2], vec![1.0f64, -0.7]).unwrap());
        // Build mismatch by perturbation asymmetry: graph computes sum(x*x),
        // but we inject a wrong analytic gradient by checking a graph whose
        // backward is correct for a DIFFERENT loss. Simplest honest trap:
        // make the "function" non-deterministic in value between the analytic
        // and numeric runs via a counter.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let report = grad_check(
            |tape, ps| {
                let x = tape.param(&ps[0])?;
                let n = calls.get();
                calls.set(n + 1);
                // After the first three calls (determinism pair + analytic
                // build), change the function so numeric slopes disagree.
                let y = if n < 3 { tape.mul(x, x)? } else { tape.mul_scalar(x, 2.0)? };
                tape.sum_all(y)
            },
            &[p],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn detects_nondeterministic_forward() {
        use std::cell::Cell;
        let flip = Cell::new(false);
        let p = Parameter::new("x", Tensor::from_vec(&[1], vec![1.0f64]).unwrap());
        let err = grad_check(
            |tape, ps| {
                let x = tape.param(&ps[0])?;
                let bump = if flip.replace(true) { 1e-13 } else { 0.0 };
                tape.add_scalar(x, bump).and_then(|v| tape.sum_all(v))
            },
            &[p],
            &GradCheckOpts::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SfcError::Determinism(_)));
    }

    #[test]
    fn multi_parameter_report_names_each() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Parameter::new("a", Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut rng));
        let b = Parameter::new("b", Tensor::<f64>::uniform(&[3, 2], -1.0, 1.0, &mut rng));
        let report = grad_check(
            |tape, ps| {
                let a = tape.param(&ps[0])?;
                let b = tape.param(&ps[1])?;
                let c = tape.matmul(a, b)?;
                let t = tape.tanh(c)?;
                tape.sum_all(t)
            },
            &[a, b],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.params.len(), 2);
        assert_eq!(report.params[0].name, "a");
        assert_eq!(report.params[1].name, "b");
    }
}
