//! Parameterized layers. Each layer owns only its configuration and parameter
//! names; values live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const GDN_BETA_MIN: f64 = 1e-6;
const GDN_GAMMA_INIT: f64 = 0.1;
/// Raw off-diagonal GDN entry; squares to ~1e-6, effectively zero but still trainable.
const GDN_OFFDIAG_RAW: f64 = 1e-3;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect()
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride, groups: 1 }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let cg = self.cin / self.groups;
        let fan_in = cg * self.k * self.k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = [self.cout, cg, self.k, self.k];
        store.insert(&self.weight(), Tensor::new(&shape, uniform(rng, shape.iter().product(), bound))?, true)?;
        store.insert(&self.bias(), Tensor::new(&[self.cout], uniform(rng, self.cout, bound))?, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &self.weight())?;
        let b = g.param(p, &self.bias())?;
        g.conv2d(x, w, Some(b), self.stride, self.k / 2, self.groups)
    }
}

/// Transposed convolution mapping `H -> stride * H`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvT {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        // each output pixel sees about cin * k^2 / stride^2 taps
        let fan_in = (self.cin * self.k * self.k / (self.stride * self.stride)).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = [self.cin, self.cout, self.k, self.k];
        store.insert(&format!("{}.w", self.name), Tensor::new(&shape, uniform(rng, shape.iter().product(), bound))?, true)?;
        store.insert(&format!("{}.b", self.name), Tensor::new(&[self.cout], uniform(rng, self.cout, bound))?, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.w", self.name))?;
        let b = g.param(p, &format!("{}.b", self.name))?;
        g.conv2d_transpose(x, w, Some(b), self.stride, self.k / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self { name: name.into(), cin, cout }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (self.cin as f64).sqrt();
        store.insert(
            &format!("{}.w", self.name),
            Tensor::new(&[self.cout, self.cin], uniform(rng, self.cout * self.cin, bound))?,
            true,
        )?;
        store.insert(&format!("{}.b", self.name), Tensor::new(&[self.cout], uniform(rng, self.cout, bound))?, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.w", self.name))?;
        let b = g.param(p, &format!("{}.b", self.name))?;
        g.linear(x, w, Some(b))
    }
}

/// GDN / inverse GDN with square-root parameter storage:
/// `beta = beta_raw^2 + beta_min`, `gamma = gamma_raw^2`.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub name: String,
    pub channels: usize,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(name: impl Into<String>, channels: usize, inverse: bool) -> Self {
        Self { name: name.into(), channels, inverse }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        let beta_raw = ((1.0 - GDN_BETA_MIN) as f32).sqrt();
        store.insert(&format!("{}.beta", self.name), Tensor::full(&[c], beta_raw), true)?;
        let diag = (GDN_GAMMA_INIT as f32).sqrt();
        let gamma = Tensor::from_fn(&[c, c], |i| if i / c == i % c { diag } else { GDN_OFFDIAG_RAW as f32 });
        store.insert(&format!("{}.gamma", self.name), gamma, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let br = g.param(p, &format!("{}.beta", self.name))?;
        let gr = g.param(p, &format!("{}.gamma", self.name))?;
        let b2 = g.square(br);
        let beta = g.add_scalar(b2, T::lit(GDN_BETA_MIN));
        let gamma = g.square(gr);
        g.gdn(x, beta, gamma, self.inverse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gdn_init_matches_documented_effective_values() {
        let mut s = ParamStore::new();
        Gdn::new("g", 3, false).init(&mut s).unwrap();
        let mut g = Graph::<f64>::inference();
        let s64 = s.cast::<f64>();
        let br = g.param(&s64, "g.beta").unwrap();
        let gr = g.param(&s64, "g.gamma").unwrap();
        let b2 = g.square(br);
        let beta = g.add_scalar(b2, GDN_BETA_MIN);
        let gamma = g.square(gr);
        assert!(g.value(beta).data().iter().all(|&b| (b - 1.0).abs() < 1e-6));
        let gm = g.value(gamma).data();
        assert!((gm[0] - 0.1).abs() < 1e-6 && gm[1] < 2e-6);
    }

    #[test]
    fn conv_init_respects_fan_in_bound() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv::new("c", 4, 8, 3, 1).init(&mut s, &mut rng).unwrap();
        let bound = 1.0 / 6.0;
        assert!(s.get("c.w").unwrap().value.data().iter().all(|v| v.abs() <= bound + 1e-7));
        assert_eq!(s.get("c.w").unwrap().value.shape(), &[8, 4, 3, 3]);
    }
}
