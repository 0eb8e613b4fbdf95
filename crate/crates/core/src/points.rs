//! Non-differentiable geometric primitives: sampling, neighbour search, and
//! interpolation weights. All searches are exact brute force with ties
//! resolved toward the lowest index.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{dist2, sub3, Point3, Real};

/// Guard added to distances before inversion in three-NN weights.
pub const THREE_NN_EPS: f64 = 1e-10;

/// One frame: coordinates in meters, optional per-point features, optional
/// validity mask (`true` = a correspondence exists).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub coords: Vec<Point3<T>>,
    pub feats: Option<Tensor<T>>,
    pub mask: Option<Vec<bool>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(coords: Vec<Point3<T>>) -> Result<Self> {
        let cloud = Self {
            coords,
            feats: None,
            mask: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        if let Some(f) = &self.feats {
            if f.rows() != self.len() {
                return Err(Error::invalid(format!(
                    "feature rows {} != point count {}",
                    f.rows(),
                    self.len()
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != self.len() {
                return Err(Error::invalid(format!("mask length {} != point count {}", m.len(), self.len())));
            }
        }
        Ok(())
    }

    /// Rows `idx` of coordinates, features and mask.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range for {} points", self.len())));
        }
        let coords = idx.iter().map(|&i| self.coords[i]).collect();
        let feats = match &self.feats {
            Some(f) => {
                let c = f.cols();
                let data = idx.iter().flat_map(|&i| f.row(i).iter().copied()).collect();
                Some(Tensor::new(vec![idx.len(), c], data)?)
            }
            None => None,
        };
        let mask = self.mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect());
        Ok(Self { coords, feats, mask })
    }
}

/// Greedy farthest point sampling starting from `start`. Each step appends
/// the point maximizing its squared distance to the selected set; ties go to
/// the lowest index.
pub fn farthest_point_sample<T: Real>(coords: &[Point3<T>], n_out: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if n_out == 0 || n_out > n {
        return Err(Error::invalid(format!("farthest_point_sample: n_out={n_out} for {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("farthest_point_sample: start {start} >= {n}")));
    }
    let mut selected = Vec::with_capacity(n_out);
    let mut min_d = vec![T::infinity(); n];
    let mut cur = start;
    for _ in 0..n_out {
        selected.push(cur);
        let c = coords[cur];
        min_d[cur] = T::neg_infinity();
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for (i, p) in coords.iter().enumerate() {
            let md = &mut min_d[i];
            if *md == T::neg_infinity() {
                continue;
            }
            let d = dist2(p, &c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        cur = best;
    }
    Ok(selected)
}

/// K nearest neighbours of each query: `indices`/`dist` are `m * k` row-major,
/// sorted ascending by distance, ties toward the lowest target index.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub dist: Vec<T>,
}

impl<T: Real> Neighbors<T> {
    pub fn num_queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

pub fn knn<T: Real>(queries: &[Point3<T>], targets: &[Point3<T>], k: usize) -> Result<Neighbors<T>> {
    let n = targets.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("knn: K={k} with {n} targets")));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut dist = Vec::with_capacity(queries.len() * k);
    // Sorted top-K by (squared distance, index). Targets are visited in index
    // order, so a candidate tying the current worst distance never displaces it.
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for q in queries {
        best.clear();
        for (i, t) in targets.iter().enumerate() {
            let d = dist2(q, t);
            if best.len() == k {
                if d >= best[k - 1].0 {
                    continue;
                }
                best.pop();
            }
            let at = best.partition_point(|b| b.0 <= d);
            best.insert(at, (d, i));
        }
        for &(d, i) in &best {
            indices.push(i);
            dist.push(d.sqrt());
        }
    }
    Ok(Neighbors { k, indices, dist })
}

/// Inverse-distance weights over the three nearest sources of each query.
pub fn three_nn_weights<T: Real>(queries: &[Point3<T>], sources: &[Point3<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    if sources.len() < 3 {
        return Err(Error::invalid(format!("three_nn_weights needs >= 3 sources, got {}", sources.len())));
    }
    let nb = knn(queries, sources, 3)?;
    let eps = T::lit(THREE_NN_EPS);
    let mut weights = Vec::with_capacity(nb.dist.len());
    for d in nb.dist.chunks_exact(3) {
        let inv = [
            T::one() / (d[0] + eps),
            T::one() / (d[1] + eps),
            T::one() / (d[2] + eps),
        ];
        let s = inv[0] + inv[1] + inv[2];
        weights.extend(inv.iter().map(|&v| v / s));
    }
    Ok((nb.indices, weights))
}

/// Groups neighbourhoods as `[m, K, 3 + c]`: relative coordinate
/// `coords[idx] - center` followed by the neighbour's feature row.
/// Differentiable with respect to `feats`.
pub fn group_relative<T: Real>(
    g: &mut Graph<T>,
    centers: &[Point3<T>],
    neighbors: &Neighbors<T>,
    coords: &[Point3<T>],
    feats: Option<Var>,
) -> Result<Var> {
    let k = neighbors.k;
    let m = centers.len();
    if neighbors.indices.len() != m * k {
        return Err(Error::invalid(format!(
            "group_relative: {} indices for {m} centers x K={k}",
            neighbors.indices.len()
        )));
    }
    let mut rel = Vec::with_capacity(m * k * 3);
    for (c, row) in centers.iter().zip(neighbors.indices.chunks_exact(k)) {
        for &i in row {
            let p = coords
                .get(i)
                .ok_or_else(|| Error::invalid(format!("group_relative: index {i} out of range")))?;
            rel.extend_from_slice(&sub3(p, c));
        }
    }
    let rel = g.constant_from(vec![m * k, 3], rel)?;
    let grouped = match feats {
        Some(f) => {
            if g.shape(f)[0] != coords.len() {
                return Err(Error::invalid("group_relative: feature rows differ from coordinate count"));
            }
            let nf = g.gather_rows(f, &neighbors.indices)?;
            g.concat(&[rel, nf])?
        }
        None => rel,
    };
    let c = g.shape(grouped)[1];
    g.reshape(grouped, vec![m, k, c])
}

/// Uniform sampling without replacement; returns the subsampled cloud and
/// the chosen source indices.
pub fn random_subsample<T: Real>(cloud: &PointCloud<T>, n_out: usize, seed: u64) -> Result<(PointCloud<T>, Vec<usize>)> {
    if n_out > cloud.len() {
        return Err(Error::invalid(format!("random_subsample: {n_out} > {} points", cloud.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, cloud.len(), n_out).into_vec();
    Ok((cloud.select(&idx)?, idx))
}
