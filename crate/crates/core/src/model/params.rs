use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Stand-ins for backbone weights that would be loaded pre-trained.
    Pretrained,
    Base,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a [`ParamSet`], valid on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    /// Places every parameter on `g`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| if trainable { g.param(&e.tensor) } else { g.constant(&e.tensor) })
            .collect();
        Bound { vars }
    }

    /// Binds parameters as slices of one flat vector node, which lets a
    /// finite-difference check perturb every scalar of the model.
    pub fn bind_flat(&self, g: &mut Graph<T>, flat: Var) -> Result<Bound> {
        let total: usize = g.shape(flat).iter().product();
        if total != self.numel() {
            return Err(Error::dim(format!(
                "flat parameter vector has {total} values, model has {}",
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            vars.push(g.narrow(flat, offset, e.tensor.shape().to_vec())?);
            offset += e.tensor.len();
        }
        Ok(Bound { vars })
    }

    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect();
        Tensor::vector(data).expect("non-empty parameter set")
    }

    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Replaces tensor payloads from `(name, tensor)` pairs; names and
    /// shapes must match this set exactly.
    pub fn assign_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            let slot = &mut self.entries[id.0].tensor;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone().with_requires_grad(false)))
            .collect()
    }
}

/// Xavier/Glorot uniform initialiser drawing from one stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn xavier<T: Real>(&mut self, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect();
        Tensor::new(shape, data).expect("valid init shape")
    }
}
