use super::tape::{Tape, Var};
use super::{numel, Real};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Option<Vec<T>>,
}

/// A named tensor as it appears in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

/// Tape nodes created by [`ParamStore::bind`], one per parameter.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if numel(shape) != value.len() {
            return Err(Error::shape("param", shape, &[value.len()]));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Copy every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    tape.leaf(p.value.clone(), &p.shape, trainable)
                        .expect("parameter shape validated on insertion")
                })
                .collect(),
        )
    }

    /// Add the gradients that `tape` holds for `bound` into each parameter's
    /// gradient slot. Parameters the loss did not reach get a zero gradient.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            let slot = p.grad.get_or_insert_with(|| vec![T::zero(); p.value.len()]);
            if let Some(g) = tape.grad(v) {
                slot.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
                    grad: None,
                })
                .collect(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect()
    }

    /// Overwrite every parameter from `tensors`, matched by name.
    ///
    /// Fails without touching `self` if any parameter is missing or has a
    /// different shape. Tensors the store does not own are ignored.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut picks = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if t.shape != p.shape {
                return Err(Error::shape("load_named", &p.shape, &t.shape));
            }
            picks.push(t);
        }
        for (p, t) in self.params.iter_mut().zip(picks) {
            p.value = t.data.iter().map(|&v| T::lit(v as f64)).collect();
            p.grad = None;
        }
        Ok(())
    }
}
