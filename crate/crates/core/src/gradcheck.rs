//! Finite-difference checks of whole graphs, parameters included.

use hkd_tensor::{Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Graph, ParamStore};

#[derive(Clone, Debug)]
pub struct GraphCheckReport {
    /// `(name, relative error)` per parameter, then `input{i}` per input.
    pub errors: Vec<(String, f64)>,
}

impl GraphCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.errors.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(1e-8f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Compares backward through `f` against central differences with step `h`
/// for every parameter element and every input element.
///
/// `f` gets a graph over `params` and one variable per input and must return
/// a scalar.
pub fn check_graph_gradients<F>(params: &ParamStore<f64>, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GraphCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    check_graph_gradients_steps(params, inputs, &[h], f)
}

/// Like [`check_graph_gradients`] but tries every step in `steps` and keeps
/// the best agreement per tensor. Deep ReLU stacks need this: large steps
/// cross kinks, small ones drown weak gradients in roundoff.
pub fn check_graph_gradients_steps<F>(
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    steps: &[f64],
    f: F,
) -> Result<GraphCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    if steps.is_empty() || steps.iter().any(|h| !(*h > 0.0)) {
        return Err(CoreError::Usage("finite-difference steps must be positive".into()));
    }
    let eval = |store: &ParamStore<f64>, values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::frozen(store);
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.tape.value(out).item()?)
    };

    let mut g = Graph::trainable(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    if g.tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(CoreError::Usage("gradient check needs a scalar output".into()));
    }
    let grads = g.tape.backward(loss)?;
    let param_grads = g.param_grads(&grads);

    let mut errors = Vec::new();
    let mut store = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name).expect("listed").clone();
        let analytic = param_grads
            .get(&name)
            .map_or_else(|| vec![0.0; base.numel()], |t| t.data().to_vec());
        let mut best = f64::INFINITY;
        for &h in steps {
            let mut numeric = vec![0.0; base.numel()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let v = base.data()[j];
                store.get_mut(&name).expect("listed").data_mut()[j] = v + h;
                let plus = eval(&store, inputs)?;
                store.get_mut(&name).expect("listed").data_mut()[j] = v - h;
                let minus = eval(&store, inputs)?;
                store.get_mut(&name).expect("listed").data_mut()[j] = v;
                *slot = (plus - minus) / (2.0 * h);
            }
            best = best.min(rel_error(&analytic, &numeric));
        }
        errors.push((name, best));
    }

    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads.get(*var).map_or_else(|| vec![0.0; n], |t| t.data().to_vec());
        let mut best = f64::INFINITY;
        for &h in steps {
            let mut numeric = vec![0.0; n];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let v = inputs[i].data()[j];
                work[i].data_mut()[j] = v + h;
                let plus = eval(params, &work)?;
                work[i].data_mut()[j] = v - h;
                let minus = eval(params, &work)?;
                work[i].data_mut()[j] = v;
                *slot = (plus - minus) / (2.0 * h);
            }
            best = best.min(rel_error(&analytic, &numeric));
        }
        errors.push((format!("input{i}"), best));
    }
    Ok(GraphCheckReport { errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_param_and_input() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let x = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let report = check_graph_gradients(&params, &[x], 1e-4, |g, v| {
            let w = g.param("w")?;
            let p = g.tape.hadamard(w, v[0])?;
            let s = g.tape.square(p);
            Ok(g.tape.sum(s))
        })
        .unwrap();
        assert_eq!(report.errors.len(), 2);
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }
}
