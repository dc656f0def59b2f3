//! Finite-difference verification oracle for the tape gradients.

use super::{Tape, Tensor, Var};

/// Ordered collection of named parameter tensors. Order is insertion order
/// and is part of the contract: optimizers and checkpoints rely on it.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn at(&self, idx: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[idx];
        (n, t)
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameters registered as leaves on a tape, in store order. Forward code
/// looks leaves up by name; the trainer and [`grad_check`] read gradients
/// back through the same handles.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(store: &'a ParamStore, tape: &mut Tape) -> Self {
        let vars = store.iter().map(|(_, t)| tape.leaf(t)).collect();
        BoundParams { store, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    pub fn var_at(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Copies tape gradients back into `grads` (same layout as the store),
    /// adding onto whatever is already there.
    pub fn accumulate_grads(&self, tape: &Tape, grads: &mut [Vec<f64>]) {
        assert_eq!(grads.len(), self.vars.len());
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = tape.grad(*v) {
                for (a, b) in grads[i].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

/// Outcome of a finite-difference gradient check. Failures are reported,
/// never thrown.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub h: f64,
    pub max_rel_err: f64,
    /// (param name, entry index, analytic, finite-difference) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Max relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn summary(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.worst {
            Some((name, idx, a, fd)) => format!(
                "{status}: max rel err {:.3e} (tol {:.1e}) at {name}[{idx}] analytic={a:.6e} fd={fd:.6e}",
                self.max_rel_err, self.tol
            ),
            None => format!("{status}: no trainable entries checked"),
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares the tape gradient of `f` against central finite differences
/// `(f(p+h) − f(p−h)) / 2h` for every entry of every `requires_grad`
/// parameter. `f` must be deterministic given the bound parameters.
pub fn grad_check<E, F>(params: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&BoundParams<'_>, &mut Tape) -> Result<Var, E>,
{
    assert!(h > 0.0, "step size must be positive");

    // Analytic pass.
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(params, &mut tape);
        let loss = f(&bound, &mut tape)?;
        tape.backward(loss).expect("backward on a fresh tape");
        for i in 0..params.len() {
            let g = tape
                .grad(bound.var_at(i))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; params.at(i).1.numel()]);
            analytic.push(g);
        }
    }

    let eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(store, &mut tape);
        let loss = f(&bound, &mut tape)?;
        Ok(tape.scalar_value(loss))
    };

    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut per_param = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let (name, tensor) = params.at(i);
        let name = name.to_string();
        if !tensor.requires_grad {
            per_param.push((name, 0.0));
            continue;
        }
        let mut param_max = 0.0f64;
        for e in 0..tensor.numel() {
            let orig = work.at(i).1.data[e];
            work.tensor_mut(i).data[e] = orig + h;
            let plus = eval(&work)?;
            work.tensor_mut(i).data[e] = orig - h;
            let minus = eval(&work)?;
            work.tensor_mut(i).data[e] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[i][e];
            let err = rel_err(a, fd);
            param_max = param_max.max(err);
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((name.clone(), e, a, fd));
            }
        }
        per_param.push((name, param_max));
    }

    Ok(GradCheckReport {
        tol,
        h,
        max_rel_err,
        worst,
        per_param,
    })
}
