//! Attentive flow embeddings between two point clouds.
//!
//! Every embedding here follows the same pattern: for each query point `i`
//! and candidate `k`, build the displacement vector
//! `d = x_i ⊕ y_k ⊕ (x_i - y_k) ⊕ |x_i - y_k|`, form a per-pair feature `h`
//! with an MLP, score it with `MLP(FC(d) ⊕ h)`, softmax the scores over the
//! candidates (per channel), and sum `h ⊙ w` over the candidates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{Fc, Mlp};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::points::knn;
use crate::scalar::{Point3, Real};

/// Channels of the displacement vector: 3 + 3 + 3 + 1.
pub const DISPLACEMENT_DIM: usize = 10;

/// How the PC1/PC2 feature pair enters the per-pair MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityMode {
    /// L2-normalized features concatenated.
    Concat,
    /// `<p, q>`.
    Product,
    /// `<p/|p|, q/|q|>`.
    Cosine,
    /// Inner product of per-point standardized features.
    NormalizedProduct,
}

impl SimilarityMode {
    pub const ALL: [SimilarityMode; 4] = [Self::Concat, Self::Product, Self::Cosine, Self::NormalizedProduct];

    fn width(self, c: usize) -> usize {
        match self {
            Self::Concat => 2 * c,
            _ => 1,
        }
    }
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Product => "product",
            Self::Cosine => "cosine",
            Self::NormalizedProduct => "normalized_product",
        })
    }
}

impl FromStr for SimilarityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "product" => Ok(Self::Product),
            "cosine" => Ok(Self::Cosine),
            "normalized_product" => Ok(Self::NormalizedProduct),
            _ => Err(Error::Config(format!("unknown similarity mode `{s}`"))),
        }
    }
}

/// Which PC2 points each PC1 point correlates with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CandidateMode {
    AllToAll,
    Knn(usize),
}

impl fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AllToAll => f.write_str("all_to_all"),
            Self::Knn(k) => write!(f, "knn:{k}"),
        }
    }
}

impl FromStr for CandidateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all_to_all" {
            return Ok(Self::AllToAll);
        }
        let k = s
            .strip_prefix("knn:")
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("candidate mode `{s}` is neither `all_to_all` nor `knn:K`")))?;
        if k == 0 {
            return Err(Error::Config("knn candidate mode needs K >= 1".into()));
        }
        Ok(Self::Knn(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EmbeddingConfig {
    pub similarity: SimilarityMode,
    pub backward_validation: bool,
    pub candidates: CandidateMode,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityMode::Concat,
            backward_validation: true,
            candidates: CandidateMode::AllToAll,
        }
    }
}

/// Intermediate tensors of one embedding pass, kept for inspection.
#[derive(Clone, Debug)]
pub struct EmbeddingTrace {
    /// Displacement vectors `[n1, K, 10]`.
    pub d: Var,
    /// Backward validation vectors `[n2, c_s]`, one per PC2 point.
    pub backward: Option<Var>,
    /// Backward vectors broadcast to every pair `[n1, K, c_s]`.
    pub backward_pairs: Option<Var>,
    /// Attention weights `[n1, K, c]`.
    pub weights: Var,
    /// Output embedding `[n1, c]`.
    pub out: Var,
    /// Candidate PC2 indices per PC1 point, `n1 * k` row-major.
    pub candidates: Vec<usize>,
    pub k: usize,
}

/// Displacement features for gathered query/candidate coordinates `[P, 3]`.
pub fn displacement<T: Real>(g: &mut Graph<T>, xi: Var, yk: Var) -> Result<Var> {
    let diff = g.sub(xi, yk)?;
    let dist = g.row_norm(diff);
    g.concat(&[xi, yk, diff, dist])
}

/// Softmax-weighted sum over candidates: returns (weights, output).
fn attend<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    d_fc: &Fc,
    attn: &Mlp,
    d: Var,
    h: Var,
    n: usize,
    k: usize,
) -> Result<(Var, Var)> {
    let fd = d_fc.forward(g, ps, d)?;
    let joined = g.concat(&[fd, h])?;
    let score = attn.forward(g, ps, joined)?;
    let c = g.shape(h)[1];
    let score = g.reshape(score, vec![n, k, c])?;
    let h3 = g.reshape(h, vec![n, k, c])?;
    let w = g.softmax(score, 1)?;
    let hw = g.mul(h3, w)?;
    let out = g.sum_over(hw, 1)?;
    Ok((w, out))
}

/// First-stage embedding of PC1 points against PC2 candidates, with optional
/// backward reliability validation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveEmbedding {
    pub name: String,
    pub cfg: EmbeddingConfig,
    pub feat_dim: usize,
    h_mlp: Mlp,
    backward_fc: Option<Fc>,
    d_fc: Fc,
    attn: Mlp,
}

impl AttentiveEmbedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: EmbeddingConfig,
        feat_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let CandidateMode::Knn(0) = cfg.candidates {
            return Err(Error::invalid(format!("{name}: knn candidate mode needs K >= 1")));
        }
        let backward_fc = if cfg.backward_validation {
            Some(Fc::new(store, &format!("{name}.backward_fc"), feat_dim, out_dim, rng)?)
        } else {
            None
        };
        let s_dim = backward_fc.as_ref().map_or(0, |f| f.out_dim);
        let h_in = DISPLACEMENT_DIM + cfg.similarity.width(feat_dim) + s_dim;
        let h_mlp = Mlp::new(store, &format!("{name}.h_mlp"), h_in, &[out_dim, out_dim], rng)?;
        let d_fc = Fc::new(store, &format!("{name}.d_fc"), DISPLACEMENT_DIM, out_dim, rng)?;
        let attn = Mlp::new(store, &format!("{name}.attn"), 2 * out_dim, &[out_dim, out_dim], rng)?;
        Ok(Self {
            name: name.to_string(),
            cfg,
            feat_dim,
            h_mlp,
            backward_fc,
            d_fc,
            attn,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.h_mlp.out_dim()
    }

    /// `x1` holds PC1 coordinates `[n1, 3]` (it may depend on parameters,
    /// e.g. after warping); PC2 coordinates are data.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x1: Var,
        p1: Var,
        y2: &[Point3<T>],
        q2: Var,
    ) -> Result<EmbeddingTrace> {
        let n1 = g.shape(x1)[0];
        let n2 = y2.len();
        let c1 = g.shape(p1)[1];
        let c2 = g.shape(q2)[1];
        if c1 != c2 || c1 != self.feat_dim {
            return Err(Error::invalid(format!(
                "{}: feature channels pc1={c1}, pc2={c2}, expected {}",
                self.name, self.feat_dim
            )));
        }
        if g.shape(p1)[0] != n1 || g.shape(q2)[0] != n2 {
            return Err(Error::invalid(format!("{}: feature rows differ from point counts", self.name)));
        }

        let (k, candidates) = match self.cfg.candidates {
            CandidateMode::AllToAll => (n2, (0..n1).flat_map(|_| 0..n2).collect::<Vec<_>>()),
            CandidateMode::Knn(k) => {
                let queries: Vec<Point3<T>> = g.value(x1).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                let nb = knn(&queries, y2, k)?;
                g.note_branch(&nb.indices);
                (k, nb.indices)
            }
        };
        let pair_i: Vec<usize> = (0..n1).flat_map(|i| std::iter::repeat(i).take(k)).collect();

        let xi = g.gather_rows(x1, &pair_i)?;
        let yk: Vec<T> = candidates.iter().flat_map(|&j| y2[j]).collect();
        let yk = g.constant_from(vec![candidates.len(), 3], yk)?;
        let d = displacement(g, xi, yk)?;

        let sim = match self.cfg.similarity {
            SimilarityMode::Concat => {
                let pn = g.l2_normalize(p1);
                let qn = g.l2_normalize(q2);
                let a = g.gather_rows(pn, &pair_i)?;
                let b = g.gather_rows(qn, &candidates)?;
                g.concat(&[a, b])?
            }
            mode => {
                let (pa, qb) = match mode {
                    SimilarityMode::Product => (p1, q2),
                    SimilarityMode::Cosine => (g.l2_normalize(p1), g.l2_normalize(q2)),
                    _ => (g.standardize(p1), g.standardize(q2)),
                };
                let a = g.gather_rows(pa, &pair_i)?;
                let b = g.gather_rows(qb, &candidates)?;
                g.row_dot(a, b)?
            }
        };

        let (backward, backward_pairs) = match &self.backward_fc {
            Some(fc) => {
                // max over every PC1 point of p_i ⊙ q_j, for each PC2 point j.
                let all_i: Vec<usize> = (0..n1).flat_map(|i| std::iter::repeat(i).take(n2)).collect();
                let all_j: Vec<usize> = (0..n1).flat_map(|_| 0..n2).collect();
                let a = g.gather_rows(p1, &all_i)?;
                let b = g.gather_rows(q2, &all_j)?;
                let prod = g.mul(a, b)?;
                let prod = g.reshape(prod, vec![n1, n2, c1])?;
                let (pooled, _) = g.max_reduce(prod, 0)?;
                let s = fc.forward(g, ps, pooled)?;
                let sk = g.gather_rows(s, &candidates)?;
                (Some(s), Some(sk))
            }
            None => (None, None),
        };

        let mut parts = vec![d, sim];
        parts.extend(backward_pairs);
        let h_in = g.concat(&parts)?;
        let h = self.h_mlp.forward(g, ps, h_in)?;
        let (weights, out) = attend(g, ps, &self.d_fc, &self.attn, d, h, n1, k)?;

        let d3 = g.reshape(d, vec![n1, k, DISPLACEMENT_DIM])?;
        let backward_pairs = match backward_pairs {
            Some(sk) => {
                let cs = g.shape(sk)[1];
                Some(g.reshape(sk, vec![n1, k, cs])?)
            }
            None => None,
        };
        Ok(EmbeddingTrace {
            d: d3,
            backward,
            backward_pairs,
            weights,
            out,
            candidates,
            k,
        })
    }
}

/// Second-stage attentive aggregation of an embedding over each point's K
/// nearest neighbours within the same cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAggregation {
    pub name: String,
    pub k: usize,
    pub in_dim: usize,
    h_mlp: Mlp,
    d_fc: Fc,
    attn: Mlp,
}

impl SelfAggregation {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h_mlp = Mlp::new(store, &format!("{name}.h_mlp"), DISPLACEMENT_DIM + in_dim, &[out_dim, out_dim], rng)?;
        let d_fc = Fc::new(store, &format!("{name}.d_fc"), DISPLACEMENT_DIM, out_dim, rng)?;
        let attn = Mlp::new(store, &format!("{name}.attn"), 2 * out_dim, &[out_dim, out_dim], rng)?;
        Ok(Self {
            name: name.to_string(),
            k,
            in_dim,
            h_mlp,
            d_fc,
            attn,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.h_mlp.out_dim()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x1: Var, fe: Var) -> Result<EmbeddingTrace> {
        let n = g.shape(x1)[0];
        if g.shape(fe) != [n, self.in_dim] {
            return Err(Error::Shape {
                op: "self aggregation",
                left: g.shape(fe).to_vec(),
                right: vec![n, self.in_dim],
            });
        }
        let pts: Vec<Point3<T>> = g.value(x1).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let nb = knn(&pts, &pts, self.k)?;
        g.note_branch(&nb.indices);
        let k = self.k;
        let pair_i: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let xi = g.gather_rows(x1, &pair_i)?;
        let xk = g.gather_rows(x1, &nb.indices)?;
        let d = displacement(g, xi, xk)?;
        let fk = g.gather_rows(fe, &nb.indices)?;
        let h_in = g.concat(&[d, fk])?;
        let h = self.h_mlp.forward(g, ps, h_in)?;
        let (weights, out) = attend(g, ps, &self.d_fc, &self.attn, d, h, n, k)?;
        let d3 = g.reshape(d, vec![n, k, DISPLACEMENT_DIM])?;
        Ok(EmbeddingTrace {
            d: d3,
            backward: None,
            backward_pairs: None,
            weights,
            out,
            candidates: nb.indices,
            k,
        })
    }
}

/// Re-embedding between warped PC1 and PC2: KNN candidates, concatenated
/// similarity, no backward term, followed by self aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowReembedding {
    pub cross: AttentiveEmbedding,
    pub local: SelfAggregation,
}

impl FlowReembedding {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        feat_dim: usize,
        out_dim: usize,
        k_cross: usize,
        k_self: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = EmbeddingConfig {
            similarity: SimilarityMode::Concat,
            backward_validation: false,
            candidates: CandidateMode::Knn(k_cross),
        };
        let cross = AttentiveEmbedding::new(store, &format!("{name}.cross"), cfg, feat_dim, out_dim, rng)?;
        let local = SelfAggregation::new(store, &format!("{name}.self"), out_dim, out_dim, k_self, rng)?;
        Ok(Self { cross, local })
    }

    pub fn out_dim(&self) -> usize {
        self.local.out_dim()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x1: Var,
        p1: Var,
        y2: &[Point3<T>],
        q2: Var,
    ) -> Result<(EmbeddingTrace, EmbeddingTrace)> {
        let first = self.cross.forward(g, ps, x1, p1, y2, q2)?;
        let second = self.local.forward(g, ps, x1, first.out)?;
        Ok((first, second))
    }
}
