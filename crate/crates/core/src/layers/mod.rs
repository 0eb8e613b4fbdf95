//! Differentiable building blocks of the scene flow network.

mod embedding;
mod refine;
mod set_conv;

pub use embedding::{
    displacement, AttentiveEmbedding, CandidateMode, EmbeddingConfig, EmbeddingTrace, FlowReembedding, SelfAggregation,
    SimilarityMode, DISPLACEMENT_DIM,
};
pub use refine::{warp, PredictorGru, PredictorInputs, PredictorMlp, RefinementState, StateDims, Warped};
pub use set_conv::{FlowEncoder, SetConv, SetConvOut, SetUpconv};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;

/// Single linear layer without activation ("FC").
#[derive(Clone, Debug, PartialEq)]
pub struct Fc {
    w: String,
    b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Fc {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid(format!("{name}: zero width ({in_dim} -> {out_dim})")));
        }
        let fc = Self::names(name, in_dim, out_dim);
        store.insert_glorot(&fc.w, in_dim, out_dim, rng)?;
        store.insert_zeros(&fc.b, vec![out_dim])?;
        Ok(fc)
    }

    /// Weights and bias start at zero; used for the flow heads.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let fc = Self::names(name, in_dim, out_dim);
        store.insert_zeros(&fc.w, vec![in_dim, out_dim])?;
        store.insert_zeros(&fc.b, vec![out_dim])?;
        Ok(fc)
    }

    fn names(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            in_dim,
            out_dim,
        }
    }

    pub fn param_names(&self) -> [&str; 2] {
        [&self.w, &self.b]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.w)?;
        let b = g.param(ps, &self.b)?;
        g.linear(x, w, b)
    }
}

/// Shared per-point MLP: every layer but the last is followed by the
/// activation; the last is a plain linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Fc>,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(format!(
                "{name}: an MLP needs at least one hidden layer and a final layer, got widths {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Fc::new(store, &format!("{name}.{i}"), prev, w, rng)?);
            prev = w;
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, fc) in self.layers.iter().enumerate() {
            h = fc.forward(g, ps, h)?;
            if i < last {
                h = g.leaky_relu(h);
            }
        }
        Ok(h)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }
}
