//! Position warping and the two scene flow predictors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{Fc, Mlp, SetConv};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::points::three_nn_weights;
use crate::scalar::{Point3, Real};

/// PC1 warped by the coarse flow.
#[derive(Clone, Debug)]
pub struct Warped {
    /// Coarse flow interpolated at the PC1 points `[n, 3]`.
    pub f_dense: Var,
    /// `x + f_dense` as a graph value `[n, 3]`.
    pub coords: Var,
}

/// Three-NN interpolates `sparse_flow` (attached to `sparse_coords`) onto
/// `coords` and shifts the points by it.
pub fn warp<T: Real>(
    g: &mut Graph<T>,
    coords: &[Point3<T>],
    sparse_coords: &[Point3<T>],
    sparse_flow: Var,
) -> Result<Warped> {
    if g.shape(sparse_flow) != [sparse_coords.len(), 3] {
        return Err(Error::Shape {
            op: "warp",
            left: g.shape(sparse_flow).to_vec(),
            right: vec![sparse_coords.len(), 3],
        });
    }
    let (idx, w) = three_nn_weights(coords, sparse_coords)?;
    let f_dense = g.weighted_gather(sparse_flow, &idx, &w, 3)?;
    let x = g.constant_from(vec![coords.len(), 3], coords.iter().flatten().copied().collect())?;
    let coords = g.add(x, f_dense)?;
    Ok(Warped { f_dense, coords })
}

/// Which optional inputs feed the predictor. The re-embedding is always used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PredictorInputs {
    pub de: bool,
    pub p: bool,
    pub f_dense: bool,
    pub f_enc: bool,
}

impl Default for PredictorInputs {
    fn default() -> Self {
        Self {
            de: true,
            p: true,
            f_dense: true,
            f_enc: true,
        }
    }
}

impl PredictorInputs {
    pub fn without(self, name: &str) -> Result<Self> {
        let mut s = self;
        match name {
            "de" => s.de = false,
            "p" => s.p = false,
            "f_dense" => s.f_dense = false,
            "f_enc" => s.f_enc = false,
            "re" => return Err(Error::Config("the re-embedding input cannot be dropped".into())),
            _ => return Err(Error::Config(format!("unknown predictor input `{name}`"))),
        }
        Ok(s)
    }
}

impl fmt::Display for PredictorInputs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = vec![];
        if self.de {
            parts.push("de");
        }
        parts.push("re");
        if self.p {
            parts.push("p");
        }
        if self.f_dense {
            parts.push("f_dense");
        }
        if self.f_enc {
            parts.push("f_enc");
        }
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PredictorInputs {
    type Err = Error;
    /// Comma separated subset of `de,re,p,f_dense,f_enc`; `re` is implied.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Self {
            de: false,
            p: false,
            f_dense: false,
            f_enc: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "de" => out.de = true,
                "re" => {}
                "p" => out.p = true,
                "f_dense" => out.f_dense = true,
                "f_enc" => out.f_enc = true,
                _ => return Err(Error::Config(format!("unknown predictor input `{part}`"))),
            }
        }
        Ok(out)
    }
}

/// Inputs to one predictor call. All row counts must agree.
#[derive(Clone, Copy, Debug)]
pub struct RefinementState {
    pub de: Var,
    pub re: Var,
    pub p: Var,
    pub f_dense: Var,
    pub f_enc: Var,
}

impl RefinementState {
    fn rows<T: Real>(&self, g: &Graph<T>) -> Result<usize> {
        let n = g.shape(self.re)[0];
        for (name, v) in [("de", self.de), ("p", self.p), ("f_dense", self.f_dense), ("f_enc", self.f_enc)] {
            if g.shape(v)[0] != n {
                return Err(Error::invalid(format!(
                    "refinement state: `{name}` has {} rows, re has {n}",
                    g.shape(v)[0]
                )));
            }
        }
        if g.shape(self.f_dense) != [n, 3] {
            return Err(Error::invalid("refinement state: f_dense must be n x 3"));
        }
        if g.value(self.f_dense).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coarse dense flow".into()));
        }
        Ok(n)
    }
}

/// Channel widths of the predictor inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateDims {
    pub de: usize,
    pub re: usize,
    pub p: usize,
    pub f_enc: usize,
}

/// `de' = MLP(de ⊕ re ⊕ p ⊕ f_dense ⊕ f_enc)`, `f = f_dense + FC(de')`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorMlp {
    pub inputs: PredictorInputs,
    pub dims: StateDims,
    mlp: Mlp,
    head: Fc,
}

impl PredictorMlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: PredictorInputs,
        dims: StateDims,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_dim = Self::concat_width(inputs, dims);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), in_dim, widths, rng)?;
        let head = Fc::zeroed(store, &format!("{name}.flow"), mlp.out_dim(), 3)?;
        Ok(Self { inputs, dims, mlp, head })
    }

    pub fn concat_width(inputs: PredictorInputs, dims: StateDims) -> usize {
        let on = |b: bool, w: usize| if b { w } else { 0 };
        on(inputs.de, dims.de) + dims.re + on(inputs.p, dims.p) + on(inputs.f_dense, 3) + on(inputs.f_enc, dims.f_enc)
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn head(&self) -> &Fc {
        &self.head
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, s: &RefinementState) -> Result<(Var, Var)> {
        s.rows(g)?;
        let mut parts = vec![];
        if self.inputs.de {
            parts.push(s.de);
        }
        parts.push(s.re);
        if self.inputs.p {
            parts.push(s.p);
        }
        if self.inputs.f_dense {
            parts.push(s.f_dense);
        }
        if self.inputs.f_enc {
            parts.push(s.f_enc);
        }
        let x = g.concat(&parts)?;
        if g.shape(x)[1] != self.in_dim() {
            return Err(Error::invalid(format!(
                "predictor: concatenated width {} != {}",
                g.shape(x)[1],
                self.in_dim()
            )));
        }
        let de = self.mlp.forward(g, ps, x)?;
        let res = self.head.forward(g, ps, de)?;
        let f = g.add(s.f_dense, res)?;
        Ok((de, f))
    }
}

/// Gated update on point neighbourhoods with `h = de` as the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorGru {
    pub inputs: PredictorInputs,
    pub dims: StateDims,
    conv_z: SetConv,
    conv_r: SetConv,
    conv_h: SetConv,
    head: Fc,
}

impl PredictorGru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: PredictorInputs,
        dims: StateDims,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !inputs.de {
            return Err(Error::Config("the GRU predictor needs `de` as its hidden state".into()));
        }
        let x_dim = PredictorMlp::concat_width(inputs, dims) - dims.de;
        let w = [dims.de, dims.de];
        let conv_z = SetConv::new(store, &format!("{name}.z"), dims.de + x_dim, &w, k, rng)?;
        let conv_r = SetConv::new(store, &format!("{name}.r"), dims.de + x_dim, &w, k, rng)?;
        let conv_h = SetConv::new(store, &format!("{name}.h"), dims.de + x_dim, &w, k, rng)?;
        let head = Fc::zeroed(store, &format!("{name}.flow"), dims.de, 3)?;
        Ok(Self {
            inputs,
            dims,
            conv_z,
            conv_r,
            conv_h,
            head,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.dims.de
    }

    /// `(1 - z) ⊙ h + z ⊙ h~`.
    pub fn combine<T: Real>(g: &mut Graph<T>, h: Var, z: Var, h_tilde: Var) -> Result<Var> {
        let keep = g.one_minus(z);
        let a = g.mul(keep, h)?;
        let b = g.mul(z, h_tilde)?;
        g.add(a, b)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        coords: &[Point3<T>],
        s: &RefinementState,
    ) -> Result<(Var, Var)> {
        let n = s.rows(g)?;
        if n != coords.len() {
            return Err(Error::invalid("gru predictor: coordinate count differs from state rows"));
        }
        let h = s.de;
        let mut xs = vec![s.re];
        if self.inputs.p {
            xs.push(s.p);
        }
        if self.inputs.f_dense {
            xs.push(s.f_dense);
        }
        if self.inputs.f_enc {
            xs.push(s.f_enc);
        }
        let x = g.concat(&xs)?;
        let hx = g.concat(&[h, x])?;
        let z = self.conv_z.forward(g, ps, coords, Some(hx), n)?.feats;
        let z = g.sigmoid(z);
        let r = self.conv_r.forward(g, ps, coords, Some(hx), n)?.feats;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let rhx = g.concat(&[rh, x])?;
        let ht = self.conv_h.forward(g, ps, coords, Some(rhx), n)?.feats;
        let ht = g.tanh(ht);
        let h_new = Self::combine(g, h, z, ht)?;
        let res = self.head.forward(g, ps, h_new)?;
        let f = g.add(s.f_dense, res)?;
        Ok((h_new, f))
    }
}
