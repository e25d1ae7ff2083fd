//! Named parameter storage plus the glue that binds parameters onto a tape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Mat, Tape, Var};
use crate::error::{Result, TppError};
use crate::scalar::Scalar;

/// Which optimizer schedule a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder, decoder and embedding tables: updated every epoch.
    Backbone,
    /// Prompt keys and structural blocks: updated on refresh epochs only.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Group-restricted copy of all values, used for bitwise snapshots.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<Mat<T>> {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.clone()).collect()
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(TppError::Shape("parameter stores differ in length".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(TppError::Shape(format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value.assign(&b.value);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian-initialized matrix.
pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat<T> {
    Mat::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Dense layer weight with `1/sqrt(fan_in)` scale.
pub fn linear_init<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat<T> {
    normal_init(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

/// Which parameters are bound as differentiable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    Backbone,
    All,
}

impl Trainable {
    fn includes(self, g: ParamGroup) -> bool {
        match self {
            Trainable::None => false,
            Trainable::Backbone => g == ParamGroup::Backbone,
            Trainable::All => true,
        }
    }
}

/// Lazily puts parameters on a tape, once each.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: Trainable,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Binder { store, vars: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v =
            if self.trainable.includes(p.group) { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients; `None` for parameters that were not bound as
    /// trainable or had no path to the output.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Option<Mat<T>>> {
        self.vars
            .iter()
            .zip(&self.store.params)
            .map(|(v, p)| match v {
                Some(v) if self.trainable.includes(p.group) => grads.get(*v).cloned(),
                _ => None,
            })
            .collect()
    }
}
