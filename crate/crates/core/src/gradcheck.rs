//! Central finite-difference checks of reverse-mode gradients at `f64`.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Number of scalar inputs compared.
    pub checked: usize,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
}

/// Compare analytic and central-difference gradients of a scalar function
/// of `inputs`. `f` builds the scalar output from one leaf per input.
pub fn check_inputs<G>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: G) -> Result<GradReport>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Vec<f64>], trainable: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|(t, v)| {
                if trainable {
                    g.param(t.shape(), v.clone())
                } else {
                    g.constant(t.shape(), v.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let values: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let (mut g, vars, out) = run(&values, true)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, x)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();
    compare(values, &analytic, h, floor, |vals| {
        let (g, _, out) = run(vals, false)?;
        Ok(g.item(out))
    })
}

/// Same check with respect to every parameter of `stores`; `f` receives the
/// stores bound in order.
pub fn check_stores<G>(stores: &[&ParamStore<f64>], h: f64, floor: f64, f: G) -> Result<GradReport>
where
    G: Fn(&mut Graph<f64>, &[Bound]) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = stores.iter().map(|s| s.bind(&mut g, true)).collect::<std::result::Result<Vec<_>, _>>()?;
    let out = f(&mut g, &bound)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    let mut values = Vec::new();
    for (s, b) in stores.iter().zip(&bound) {
        for (p, &v) in s.iter().zip(b.vars()) {
            analytic.push(g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]));
            values.push(p.data.clone());
        }
    }
    let mut scratch: Vec<ParamStore<f64>> = stores.iter().map(|s| (*s).clone()).collect();
    compare(values, &analytic, h, floor, |vals| {
        let mut it = vals.iter();
        for s in scratch.iter_mut() {
            for p in s.iter_mut() {
                p.data.clone_from(it.next().expect("one value per parameter"));
            }
        }
        let mut g = Graph::new();
        let bound = scratch.iter().map(|s| s.bind(&mut g, false)).collect::<std::result::Result<Vec<_>, _>>()?;
        let out = f(&mut g, &bound)?;
        Ok(g.item(out))
    })
}

fn scalar_output(g: &Graph<f64>, out: Var) -> Result<()> {
    if g.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar output, got {:?}", g.shape(out))));
    }
    Ok(())
}

fn compare(
    mut values: Vec<Vec<f64>>,
    analytic: &[Vec<f64>],
    h: f64,
    floor: f64,
    mut eval: impl FnMut(&[Vec<f64>]) -> Result<f64>,
) -> Result<GradReport> {
    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst: (0, 0) };
    for i in 0..values.len() {
        for j in 0..values[i].len() {
            let x = values[i][j];
            values[i][j] = x + h;
            let up = eval(&values)?;
            values[i][j] = x - h;
            let down = eval(&values)?;
            values[i][j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err.is_nan() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
