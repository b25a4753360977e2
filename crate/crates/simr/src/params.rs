//! Named parameter storage. Parameters live here between steps; every
//! training iteration binds them into a fresh graph as grad-requiring leaves.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar};

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// Insertion-ordered map of uniquely named tensors. Order is load-bearing:
/// it fixes checkpoint layout and optimizer update order.
#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Shape {
                op: "param_insert",
                detail: format!("`{name}`: shape {shape:?} wants {want} elems, got {}", data.len()),
            });
        }
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    /// Uniform(-bound, +bound) initialization.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, shape, data)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![S::zero(); n])
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![S::one(); n])
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Bind every parameter into `g` as a grad-requiring leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Bound> {
        self.bind_impl(g, true)
    }

    /// Bind as constants (inference / finite-difference evaluation).
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Result<Bound> {
        self.bind_impl(g, false)
    }

    fn bind_impl(&self, g: &mut Graph<S>, needs_grad: bool) -> Result<Bound> {
        let mut map = IndexMap::new();
        for (name, p) in &self.entries {
            let id = g.leaf(&p.shape, p.data.clone(), needs_grad)?;
            map.insert(name.clone(), id);
        }
        Ok(Bound { map })
    }

    /// Precision conversion (f32 <-> f64) via f64.
    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, p) in &self.entries {
            let data = p.data.iter().map(|&x| T::from_f64(x.to_f64())).collect();
            out.insert(name, &p.shape, data)
                .expect("names unique by construction");
        }
        out
    }
}

/// Name -> node id mapping produced by binding a ParamSet into a graph.
pub struct Bound {
    map: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}
