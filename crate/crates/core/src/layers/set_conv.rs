use rand::Rng;

use super::Mlp;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::points::{farthest_point_sample, group_relative, knn};
use crate::scalar::{Point3, Real};

/// Output of a set conv: chosen center indices into the input cloud, their
/// coordinates, and pooled features `[n_out, c_out]`.
#[derive(Clone, Debug)]
pub struct SetConvOut<T> {
    pub idx: Vec<usize>,
    pub coords: Vec<Point3<T>>,
    pub feats: Var,
}

/// Neighbourhood MLP + max-pool over K neighbours of FPS-chosen centers.
///
/// When `n_out` equals the input size no sampling happens and the centers
/// are the input points in their original order.
#[derive(Clone, Debug, PartialEq)]
pub struct SetConv {
    pub name: String,
    pub k: usize,
    pub feat_dim: usize,
    mlp: Mlp,
}

impl SetConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        feat_dim: usize,
        mlp_widths: &[usize],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid(format!("{name}: K must be positive")));
        }
        let mlp = Mlp::new(store, &format!("{name}.mlp"), 3 + feat_dim, mlp_widths, rng)?;
        Ok(Self {
            name: name.to_string(),
            k,
            feat_dim,
            mlp,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.mlp.param_names()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        coords: &[Point3<T>],
        feats: Option<Var>,
        n_out: usize,
    ) -> Result<SetConvOut<T>> {
        let c = feats.map_or(0, |f| g.shape(f)[1]);
        if c != self.feat_dim {
            return Err(Error::invalid(format!(
                "{}: expected {} feature channels, got {c}",
                self.name, self.feat_dim
            )));
        }
        let idx = if n_out == coords.len() {
            (0..n_out).collect()
        } else {
            farthest_point_sample(coords, n_out, 0)?
        };
        let centers: Vec<Point3<T>> = idx.iter().map(|&i| coords[i]).collect();
        let nb = knn(&centers, coords, self.k)?;
        let grouped = group_relative(g, &centers, &nb, coords, feats)?;
        let h = self.mlp.forward(g, ps, grouped)?;
        let (pooled, _) = g.max_reduce(h, 1)?;
        Ok(SetConvOut {
            idx,
            coords: centers,
            feats: pooled,
        })
    }
}

/// Propagates sparse features to denser points: each dense point pools an
/// MLP over its K nearest sparse points, then mixes the result with its own
/// skip feature through a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SetUpconv {
    pub name: String,
    pub k: usize,
    pub sparse_dim: usize,
    pub dense_dim: usize,
    mlp: Mlp,
    mix: super::Fc,
}

impl SetUpconv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        sparse_dim: usize,
        dense_dim: usize,
        mlp_widths: &[usize],
        out_dim: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::new(store, &format!("{name}.mlp"), 3 + sparse_dim, mlp_widths, rng)?;
        let mix = super::Fc::new(store, &format!("{name}.mix"), mlp.out_dim() + dense_dim, out_dim, rng)?;
        Ok(Self {
            name: name.to_string(),
            k,
            sparse_dim,
            dense_dim,
            mlp,
            mix,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mix.out_dim
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        sparse_coords: &[Point3<T>],
        sparse_feats: Var,
        dense_coords: &[Point3<T>],
        dense_feats: Option<Var>,
    ) -> Result<Var> {
        if dense_coords.len() < sparse_coords.len() {
            return Err(Error::invalid(format!(
                "{}: dense level ({}) is sparser than the source ({})",
                self.name,
                dense_coords.len(),
                sparse_coords.len()
            )));
        }
        let nb = knn(dense_coords, sparse_coords, self.k)?;
        let grouped = group_relative(g, dense_coords, &nb, sparse_coords, Some(sparse_feats))?;
        let h = self.mlp.forward(g, ps, grouped)?;
        let (pooled, _) = g.max_reduce(h, 1)?;
        let joined = match dense_feats {
            Some(f) => g.concat(&[pooled, f])?,
            None => pooled,
        };
        self.mix.forward(g, ps, joined)
    }
}

/// Two non-downsampling set convs over the coarse dense flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEncoder {
    first: SetConv,
    second: SetConv,
}

impl FlowEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let first = SetConv::new(store, &format!("{name}.conv1"), 3, &[width, width], k, rng)?;
        let second = SetConv::new(store, &format!("{name}.conv2"), width, &[width, width], k, rng)?;
        Ok(Self { first, second })
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, coords: &[Point3<T>], flow: Var) -> Result<Var> {
        let n = coords.len();
        let a = self.first.forward(g, ps, coords, Some(flow), n)?;
        let b = self.second.forward(g, ps, coords, Some(a.feats), n)?;
        Ok(b.feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    fn feats(g: &mut Graph<f64>, rng: &mut impl Rng, n: usize, c: usize) -> Var {
        let data = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.constant(Tensor::new(vec![n, c], data).unwrap())
    }

    #[test]
    fn k1_full_resolution_pools_self_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let conv = SetConv::new(&mut ps, "sc", 2, &[4, 5], 1, &mut rng).unwrap();
        let pts = cloud(&mut rng, 6);
        let mut g = Graph::new();
        let f = feats(&mut g, &mut rng, 6, 2);
        let out = conv.forward(&mut g, &ps, &pts, Some(f), 6).unwrap();
        assert_eq!(out.idx, (0..6).collect::<Vec<_>>());

        // Reference: MLP(0 ⊕ p) applied row by row.
        let zeros = g.constant(Tensor::zeros(vec![6, 3]));
        let x = g.concat(&[zeros, f]).unwrap();
        let reference = conv.mlp.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(out.feats), g.value(reference));
    }

    #[test]
    fn center_set_is_permutation_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let conv = SetConv::new(&mut ps, "sc", 0, &[4, 4], 3, &mut rng).unwrap();
        let pts = cloud(&mut rng, 20);
        // Keep point 0 first so the FPS start point is the same physical point.
        let mut perm: Vec<usize> = (1..20).collect();
        perm.reverse();
        perm.insert(0, 0);
        let permuted: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let mut g = Graph::new();
        let a = conv.forward(&mut g, &ps, &pts, None, 7).unwrap();
        let b = conv.forward(&mut g, &ps, &permuted, None, 7).unwrap();
        let mut sa: Vec<_> = a.idx.clone();
        let mut sb: Vec<_> = b.idx.iter().map(|&i| perm[i]).collect();
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }

    #[test]
    fn set_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let conv = SetConv::new(&mut ps, "sc", 2, &[6, 5], 4, &mut rng).unwrap();
        let pts = cloud(&mut rng, 16);
        let fdata: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check_params(
            &mut ps,
            |g, ps| {
                let f = g.constant(Tensor::new(vec![16, 2], fdata.clone())?);
                let out = conv.forward(g, ps, &pts, Some(f), 8)?;
                let sq = g.mul(out.feats, out.feats)?;
                Ok(g.sum_all(sq))
            },
            1e-4,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.checked > 0);
    }

    #[test]
    fn upconv_shape_and_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let up = SetUpconv::new(&mut ps, "up", 3, 2, &[4, 4], 5, 1, &mut rng).unwrap();
        let pts = cloud(&mut rng, 8);
        let mut g = Graph::new();
        let sf = feats(&mut g, &mut rng, 8, 3);
        let df = feats(&mut g, &mut rng, 8, 2);
        let out = up.forward(&mut g, &ps, &pts, sf, &pts, Some(df)).unwrap();
        assert_eq!(g.shape(out), &[8, 5]);

        let dense = cloud(&mut rng, 16);
        let up2 = SetUpconv::new(&mut ps, "up2", 3, 0, &[4, 4], 5, 3, &mut rng).unwrap();
        let out = up2.forward(&mut g, &ps, &pts, sf, &dense, None).unwrap();
        assert_eq!(g.shape(out), &[16, 5]);
        assert!(up2.forward(&mut g, &ps, &dense, df, &pts, None).is_err());
    }

    #[test]
    fn upconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let up = SetUpconv::new(&mut ps, "up", 3, 2, &[6, 6], 4, 3, &mut rng).unwrap();
        let sparse = cloud(&mut rng, 8);
        let dense = cloud(&mut rng, 16);
        let sdata: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ddata: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check_params(
            &mut ps,
            |g, ps| {
                let s = g.constant(Tensor::new(vec![8, 3], sdata.clone())?);
                let d = g.constant(Tensor::new(vec![16, 2], ddata.clone())?);
                let out = up.forward(g, ps, &sparse, s, &dense, Some(d))?;
                let sq = g.mul(out, out)?;
                Ok(g.sum_all(sq))
            },
            1e-4,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn flow_encoder_shape_translation_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        let enc = FlowEncoder::new(&mut ps, "enc", 6, 4, &mut rng).unwrap();
        let pts = cloud(&mut rng, 16);
        let flow: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut g = Graph::new();
        let fv = g.constant(Tensor::new(vec![16, 3], flow.clone()).unwrap());
        let a = enc.forward(&mut g, &ps, &pts, fv).unwrap();
        assert_eq!(g.shape(a), &[16, 6]);
        let moved: Vec<_> = pts.iter().map(|p| [p[0] + 3.5, p[1] - 1.25, p[2] + 0.75]).collect();
        let b = enc.forward(&mut g, &ps, &moved, fv).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x - y).abs() < 1e-9);
        }

        let report = grad_check_params(
            &mut ps,
            |g, ps| {
                let f = g.input(Tensor::new(vec![16, 3], flow.clone())?);
                let out = enc.forward(g, ps, &pts, f)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum_all(sq))
            },
            1e-4,
            64,
            1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
