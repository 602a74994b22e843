//! Named parameter storage shared by the layers of one model.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::substream;
use crate::tensor::{Graph, Result, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Ordered list of parameters. Each one is initialized from its own substream
/// keyed by name, so adding or removing a layer never shifts the values of
/// the others.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    seed: u64,
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let mut rng = substream(self.seed, &format!("init/{name}"), 0);
        let data = (0..n)
            .map(|_| {
                F::of(match init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Uniform(b) => rng.random_range(-b..=b),
                    Init::Normal(s) => {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        s * n
                    }
                })
            })
            .collect();
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Copy every parameter onto `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.shape, p.data.clone())
                } else {
                    g.constant(&p.shape, p.data.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound(vars))
    }

    /// Same parameters at another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
