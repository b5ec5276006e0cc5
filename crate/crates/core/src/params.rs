//! Named learnable parameters with gradient slots.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{CstError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    /// `FanIn` bound multiplied by a gain.
    ScaledFanIn(usize, f64),
    /// `[C, C, k, k]` conv whose centre tap is the identity, plus Gaussian noise.
    IdentityConv(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Convolution weight `[cout, cin/groups, k, k]` and bias `[cout]`.
    pub fn conv(prefix: &str, cin: usize, cout: usize, kernel: usize, groups: usize) -> [ParamSpec; 2] {
        let fan_in = cin / groups * kernel * kernel;
        [
            ParamSpec::new(
                format!("{}.w", prefix),
                &[cout, cin / groups, kernel, kernel],
                Init::FanIn(fan_in),
            ),
            ParamSpec::new(format!("{}.b", prefix), &[cout], Init::Zeros),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.value.clone())
    }
}

fn sample_init(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            (0..n)
                .map(|_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect()
        }
        Init::FanIn(fan_in) => sample_init(Init::ScaledFanIn(fan_in, 1.0), shape, rng),
        Init::ScaledFanIn(fan_in, gain) => {
            let bound = gain / (fan_in.max(1) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).unwrap();
            (0..n).map(|_| u.sample(rng)).collect()
        }
        Init::IdentityConv(noise) => {
            assert!(
                shape.len() == 4 && shape[0] == shape[1],
                "identity init needs a square conv"
            );
            let (c, k) = (shape[0], shape[2]);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut v: Vec<f64> = (0..n).map(|_| noise * normal.sample(rng)).collect();
            for i in 0..c {
                v[((i * c + i) * k + k / 2) * k + k / 2] += 1.0;
            }
            v
        }
    }
}

/// Ordered collection of parameters keyed by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::with_capacity(specs.len());
        for s in specs {
            let value = sample_init(s.init, &s.shape, &mut rng);
            let n = value.len();
            let p = Param {
                shape: s.shape.clone(),
                value,
                grad: vec![0.0; n],
            };
            if params.insert(s.name.clone(), p).is_some() {
                return Err(CstError::Config(format!("duplicate parameter name '{}'", s.name)));
            }
        }
        Ok(ParamStore { params })
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(CstError::DimMismatch(format!(
                "parameter '{}' shape/value mismatch",
                name
            )));
        }
        if self.params.contains_key(&name) {
            return Err(CstError::Config(format!("duplicate parameter name '{}'", name)));
        }
        let n = value.len();
        self.params.insert(
            name,
            Param {
                shape,
                value,
                grad: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &[f64] {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter '{}'", name))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter '{}'", name))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Records every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), g.leaf(p.tensor())))
            .collect();
        Bound { vars }
    }

    /// Overwrites each gradient slot with the tape gradient (zero if unreached).
    pub fn store_grads(&mut self, grads: &Gradients, bound: &Bound) {
        for (name, p) in self.params.iter_mut() {
            let v = bound.vars[name];
            match grads.get(v) {
                Some(gr) => p.grad.copy_from_slice(gr),
                None => p.grad.iter_mut().for_each(|x| *x = 0.0),
            }
        }
    }

    /// Sets every weight in the collection whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Graph variables for a bound [`ParamStore`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{}' is not bound", name))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let specs = vec![
            ParamSpec::new("a", &[2], Init::Zeros),
            ParamSpec::new("a", &[3], Init::Zeros),
        ];
        assert!(ParamStore::from_specs(&specs, 0).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = vec![
            ParamSpec::new("t", &[1000], Init::TruncNormal(0.02)),
            ParamSpec::new("u", &[1000], Init::FanIn(25)),
        ];
        let a = ParamStore::from_specs(&specs, 3).unwrap();
        assert_eq!(a, ParamStore::from_specs(&specs, 3).unwrap());
        assert!(a.value("t").iter().all(|v| v.abs() <= 0.04));
        assert!(a.value("u").iter().all(|v| v.abs() <= 0.2));
        assert_eq!(a.numel(), 2000);
    }

    #[test]
    fn identity_conv_centre_tap() {
        let specs = vec![ParamSpec::new("c", &[2, 2, 3, 3], Init::IdentityConv(0.0))];
        let s = ParamStore::from_specs(&specs, 0).unwrap();
        let v = s.value("c");
        assert_eq!(v.iter().sum::<f64>(), 2.0);
        assert_eq!(v[4], 1.0);
        assert_eq!(v[3 * 9 + 4], 1.0);
    }
}
