//! Named parameter storage and gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Mat<T>,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>, frozen: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, frozen });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.data().len()).sum()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    grads: Vec<Mat<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.params.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.grads[id.0]
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().map(Mat::sq_norm).sum::<T>().sqrt()
    }
}

/// Gaussian matrix with the given standard deviation; draws are made in `f64`
/// so `f32` and `f64` models built from one seed hold the same values.
pub fn gaussian<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}
