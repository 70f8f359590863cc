//! Parameter storage, initialisation, common layers and the Adam optimiser.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Scalar, Tape, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: IndexMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from_f64(x.to_f64()))))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Places every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.var(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but converting every element to `U` on the way.
    pub fn bind_as<'t, U: Scalar>(&self, tape: &'t Tape<U>, trainable: bool) -> Bound<'t, U> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let cast = v.mapv(|x| U::from_f64(x.to_f64()));
                let var = if trainable { tape.var(cast) } else { tape.constant(cast) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Copies every entry of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }
}

/// Parameters of one network as nodes on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: IndexMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Panics when `name` is missing: layer names are fixed by the
    /// architecture that created the store.
    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn grads(&self, g: &Gradients<T>) -> IndexMap<String, ArrayD<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), g.get_or_zeros(*v)))
            .collect()
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f32> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// He-normal conv kernel `co x ci x k x k` plus a zero bias.
    pub fn conv(&mut self, store: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize) {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        store.insert(format!("{name}.weight"), self.normal(&[co, ci, k, k], std));
        store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[co])));
    }

    /// Dense `inp -> out` layer stored as an `inp x out` matrix plus bias.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, inp: usize, out: usize, gain: f64) {
        let std = gain / (inp as f64).sqrt();
        store.insert(format!("{name}.weight"), self.normal(&[inp, out], std));
        store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out])));
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) {
        store.insert(name, ArrayD::zeros(IxDyn(shape)));
    }
}

/// `conv(x)` with the `{name}.weight` / `{name}.bias` pair.
pub fn conv<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.conv2d(p.get(&format!("{name}.weight")), p.try_get(&format!("{name}.bias")))
}

/// `x W + b` for a row batch `x: N x inp`.
pub fn linear<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    let y = x.matmul(p.get(&format!("{name}.weight")));
    match p.try_get(&format!("{name}.bias")) {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Spatial mean of an `N x C x H x W` map, giving `N x C`.
pub fn global_avg_pool<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2).reshape(&[s[0], s[1]])
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, ArrayD<f32>>,
    v: IndexMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, ArrayD<f32>>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (name, g) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| *p -= step_size * mv / (vv.sqrt() + eps));
        }
    }
}
