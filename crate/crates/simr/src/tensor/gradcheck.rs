//! Central finite-difference gradient verification, always run in f64.

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, NodeId};

/// Step used by the verification suites.
pub const FD_H: f64 = 1e-5;
/// Max relative error accepted by the verification suites.
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check d(loss)/d(input) for a closure over raw leaves. `build` must return
/// a rank-0 loss node; returns the max relative error over all elements.
pub fn fd_check_inputs<F>(inputs: &[(Vec<usize>, Vec<f64>)], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g: Graph<f64> = Graph::new();
    let mut ids = Vec::new();
    for (sh, data) in inputs {
        ids.push(g.leaf(sh, data.clone(), true)?);
    }
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(id).len()])
        })
        .collect();

    let eval = |work: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let mut ids = Vec::new();
        for (sh, data) in work {
            ids.push(g.leaf(sh, data.clone(), false)?);
        }
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let mut work = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for p in 0..work.len() {
        for e in 0..work[p].1.len() {
            let orig = work[p].1[e];
            work[p].1[e] = orig + h;
            let fp = eval(&work)?;
            work[p].1[e] = orig - h;
            let fm = eval(&work)?;
            work[p].1[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[p][e], numeric));
        }
    }
    Ok(max_rel)
}

/// Check d(loss)/d(param) for a model built from a named parameter set.
pub fn fd_check_params<F>(params: &ParamSet<f64>, build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>,
{
    let mut g: Graph<f64> = Graph::new();
    let bound = params.bind(&mut g)?;
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, &id) in bound.iter() {
        let grads = g
            .grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(id).len()]);
        analytic.push((name.clone(), grads));
    }

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let bound = ps.bind_frozen(&mut g)?;
        let loss = build(&mut g, &bound)?;
        Ok(g.scalar_value(loss))
    };

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for (name, an) in &analytic {
        for e in 0..an.len() {
            let orig = work.get(name).expect("bound name").data[e];
            work.get_mut(name).unwrap().data[e] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data[e] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(an[e], numeric));
        }
    }
    Ok(max_rel)
}
