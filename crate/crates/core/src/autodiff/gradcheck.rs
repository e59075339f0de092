//! Finite-difference gradient checking.

use ndarray::Array2;

use super::{Graph, ParamStore, Var};

/// Worst per-tensor relative L2 error between the tape gradient and a
/// central difference, with the name of the offending tensor. Pinned rows
/// are skipped since the optimiser never moves them.
pub fn max_relative_error<F>(store: &mut ParamStore, f: F) -> (String, f64)
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss).dense(store)
    };
    let h = 1e-6;
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let l = f(&mut g);
        g.scalar(l)
    };
    let mut worst = (String::new(), 0.0);
    for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let shape = store.get(id).dim();
        let pinned = store.zero_row(id);
        let mut numeric = Array2::zeros(shape);
        let mut analytic_t = analytic[pi].clone();
        for i in 0..shape.0 {
            if pinned == Some(i) {
                analytic_t.row_mut(i).fill(0.0);
                continue;
            }
            for j in 0..shape.1 {
                let orig = store.get(id)[[i, j]];
                store.get_mut(id)[[i, j]] = orig + h;
                let plus = eval(store);
                store.get_mut(id)[[i, j]] = orig - h;
                let minus = eval(store);
                store.get_mut(id)[[i, j]] = orig;
                numeric[[i, j]] = (plus - minus) / (2.0 * h);
            }
        }
        let norm = |a: &Array2<f64>| a.mapv(|v| v * v).sum().sqrt();
        let diff = norm(&(&analytic_t - &numeric));
        let scale = norm(&analytic_t).max(norm(&numeric)).max(1e-10);
        if diff / scale > worst.1 {
            worst = (store.name(id).to_string(), diff / scale);
        }
    }
    worst
}
