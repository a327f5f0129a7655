use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element.
pub fn finite_diff_grad<T: Scalar>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_eps);
    }
    Tensor::new(x.shape().to_vec(), out).expect("finite difference shape")
}

/// Worst relative error observed for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            let mark = if e.max_rel_err <= self.tol { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<48} max rel err {:.3e}", e.name, e.max_rel_err)?;
        }
        write!(
            f,
            "{} params, max rel err {:.3e}, tol {:.1e}: {}",
            self.entries.len(),
            self.max_error(),
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn run<T: Scalar, F>(params: &[(String, Tensor<T>)], forward: &F) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(n, t)| tape.param(n, t)).collect();
    let loss = forward(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of a scalar `forward` against central differences.
///
/// Each parameter's error is `max |g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over
/// its elements; the check passes when every parameter is within `tol`.
/// Failures are reported, not raised.
pub fn grad_check<T: Scalar, F>(
    params: &[(String, Tensor<T>)],
    forward: F,
    eps: T,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Autograd(format!("parameter `{name}` is not finite")));
    }
    let (tape, vars, loss) = run(params, &forward)?;
    let grads = tape.backward(loss)?;
    let mut entries = Vec::with_capacity(params.len());
    for (k, (name, value)) in params.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("every parameter is a differentiable leaf");
        let numeric = finite_diff_grad(
            |probe| {
                let mut ps = params.to_vec();
                ps[k].1 = probe.clone();
                let (tape, _, loss) = run(&ps, &forward).expect("forward succeeded once");
                tape.value(loss).data()[0]
            },
            value,
            eps,
        );
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let (a, n) = (a.as_f64(), n.as_f64());
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if err > entry.max_rel_err || i == 0 {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = n;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tol })
}

fn set_element<T: Scalar, M: Module<T>>(model: &mut M, target: &str, index: usize, value: T) {
    model.visit_mut("", &mut |name, t, _| {
        if name == target {
            t.data_mut()[index] = value;
        }
    });
}

/// Grad check over the learnable tensors of a module.
///
/// `forward` must register the module's parameters under their [`Module`]
/// names (prefix `""`). Only tensors accepted by `select` are checked, and at
/// most `per_tensor` evenly spaced elements of each (`0` checks all of them).
pub fn grad_check_module<T, M, F>(
    model: &M,
    forward: F,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    eps: T,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    M: Module<T> + Clone,
    F: Fn(&mut Tape<T>, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, model)?;
    let grads = tape.backward(loss)?;
    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (name, value, kind) in model.named_tensors("") {
        if kind != ParamKind::Weight || !select(&name) {
            continue;
        }
        if !value.is_finite() {
            return Err(Error::Autograd(format!("parameter `{name}` is not finite")));
        }
        let analytic = grads
            .by_name(&name)
            .ok_or_else(|| Error::Autograd(format!("parameter `{name}` was not registered on the tape")))?;
        let n = value.numel();
        let count = if per_tensor == 0 { n } else { per_tensor.min(n) };
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..count {
            let i = j * n / count;
            let orig = value.data()[i];
            let mut eval = |v: T| -> Result<T> {
                set_element(&mut probe, &name, i, v);
                let mut t = Tape::new();
                let l = forward(&mut t, &probe)?;
                Ok(t.value(l).data()[0])
            };
            let up = eval(orig + eps)?;
            let down = eval(orig - eps)?;
            set_element(&mut probe, &name, i, orig);
            let num = ((up - down) / (eps + eps)).as_f64();
            let a = analytic.data()[i].as_f64();
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            if err > entry.max_rel_err || j == 0 {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = num;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tol })
}
