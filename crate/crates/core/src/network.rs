//! The full coarse-to-fine network: feature pyramid, all-to-all point
//! mixture, initial flow, and four refinement levels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    warp, AttentiveEmbedding, EmbeddingConfig, Fc, FlowEncoder, FlowReembedding, PredictorGru, PredictorInputs,
    PredictorMlp, RefinementState, SelfAggregation, SetConv, SetUpconv, StateDims,
};
use crate::optim::ParamStore;
use crate::points::{three_nn_weights, PointCloud};
use crate::scalar::{norm3, sub3, Point3, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    Mlp,
    Gru,
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Gru => "gru",
        })
    }
}

impl FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "gru" => Ok(Self::Gru),
            _ => Err(Error::Config(format!("unknown predictor kind `{s}`"))),
        }
    }
}

/// How the finest flow is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefinementDesign {
    /// Refinement layers at all four levels.
    FourLayerFull,
    /// No level-1 refinement; level-2 flow interpolated to the N1 points.
    Interp2048,
    /// No level-1 refinement; level-2 flow interpolated to every input point.
    Interp8192,
}

impl fmt::Display for RefinementDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FourLayerFull => "four_layer_full",
            Self::Interp2048 => "interp_2048",
            Self::Interp8192 => "interp_8192",
        })
    }
}

impl FromStr for RefinementDesign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four_layer_full" => Ok(Self::FourLayerFull),
            "interp_2048" => Ok(Self::Interp2048),
            "interp_8192" => Ok(Self::Interp8192),
            _ => Err(Error::Config(format!("unknown refinement design `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub n_input: usize,
    /// `[N1, N2, N3, N4]`, finest first.
    pub level_sizes: [usize; 4],
    /// Feature channels of the set conv pyramid, level 1 to 4.
    pub pyramid_widths: [usize; 4],
    /// Width of flow embeddings, re-embeddings and the dense embedding.
    pub embed_width: usize,
    /// Width of the flow encoder output.
    pub enc_width: usize,
    pub k_setconv: usize,
    pub k_upconv: usize,
    pub k_reembed: usize,
    pub k_gru: usize,
    pub embedding: EmbeddingConfig,
    pub predictor_kind: PredictorKind,
    pub predictor_inputs: PredictorInputs,
    pub refinement_design: RefinementDesign,
    /// Divisor applied to the full-size points and widths.
    pub scale_factor: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::scaled(1)
    }
}

impl NetworkConfig {
    /// Full-size sizes and widths divided by `factor`.
    pub fn scaled(factor: usize) -> Self {
        let f = factor.max(1);
        let d = |v: usize| (v / f).max(1);
        Self {
            n_input: d(8192),
            level_sizes: [d(2048), d(1024), d(256), d(64)],
            pyramid_widths: [d(32), d(64), d(128), d(256)],
            embed_width: d(128),
            enc_width: d(64),
            k_setconv: 16,
            k_upconv: 8,
            k_reembed: 16,
            k_gru: 8,
            embedding: EmbeddingConfig::default(),
            predictor_kind: PredictorKind::Mlp,
            predictor_inputs: PredictorInputs::default(),
            refinement_design: RefinementDesign::FourLayerFull,
            scale_factor: f,
            seed: 0,
        }
    }

    /// Input 2048, levels [512, 256, 64, 16], widths divided by 4.
    pub fn desk() -> Self {
        Self::scaled(4)
    }

    /// Number of points carrying the finest predicted flow.
    pub fn output_points(&self) -> usize {
        match self.refinement_design {
            RefinementDesign::Interp8192 => self.n_input,
            _ => self.level_sizes[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [n1, n2, n3, n4] = self.level_sizes;
        if !(self.n_input >= n1 && n1 > n2 && n2 > n3 && n3 > n4) {
            return Err(Error::Config(format!(
                "level sizes must satisfy n_input >= N1 > N2 > N3 > N4, got {} / {:?}",
                self.n_input, self.level_sizes
            )));
        }
        if n4 < 3 {
            return Err(Error::Config(format!("N4 = {n4}: three-NN interpolation needs at least 3 points")));
        }
        for (name, w) in [
            ("pyramid_widths[0]", self.pyramid_widths[0]),
            ("pyramid_widths[1]", self.pyramid_widths[1]),
            ("pyramid_widths[2]", self.pyramid_widths[2]),
            ("pyramid_widths[3]", self.pyramid_widths[3]),
            ("embed_width", self.embed_width),
            ("enc_width", self.enc_width),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let mut ks = vec![
            ("k_setconv", self.k_setconv),
            ("k_upconv", self.k_upconv),
            ("k_reembed", self.k_reembed),
        ];
        if self.predictor_kind == PredictorKind::Gru {
            ks.push(("k_gru", self.k_gru));
        }
        if let crate::layers::CandidateMode::Knn(k) = self.embedding.candidates {
            ks.push(("embedding.candidates knn", k));
        }
        for (name, k) in ks {
            if k == 0 || k > n4 {
                return Err(Error::Config(format!(
                    "{name} = {k}: neighbourhoods at level 4 have only N4 = {n4} points"
                )));
            }
        }
        if self.predictor_kind == PredictorKind::Gru && !self.predictor_inputs.de {
            return Err(Error::Config("predictor_kind = gru needs `de` among the predictor inputs".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Predictor {
    Mlp(PredictorMlp),
    Gru(PredictorGru),
}

#[derive(Clone, Debug, PartialEq)]
struct RefineLayer {
    upconv: Option<SetUpconv>,
    reembed: FlowReembedding,
    encoder: FlowEncoder,
    predictor: Predictor,
}

/// Layer objects of a built network. Parameters live in the paired
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    /// Set convs 1..3 are applied to both clouds with the same weights.
    pyramid: [SetConv; 4],
    fe: AttentiveEmbedding,
    agg: SelfAggregation,
    mix1: SetConv,
    mix2: SetConv,
    init_upconv: SetUpconv,
    init_flow: Fc,
    /// Index 0 is level 1; `None` where the design interpolates instead.
    refine: [Option<RefineLayer>; 4],
}

/// Predicted flow and embedding at one level.
#[derive(Clone, Debug)]
pub struct PyramidLevel<T> {
    pub coords: Vec<Point3<T>>,
    /// Indices of these points in the input PC1.
    pub source_idx: Vec<usize>,
    pub flow: Var,
    pub embedding: Option<Var>,
}

/// Outputs of one forward pass, finest level first.
#[derive(Clone, Debug)]
pub struct FlowPyramid<T> {
    pub levels: Vec<PyramidLevel<T>>,
    pub initial_flow: Var,
}

impl<T> FlowPyramid<T> {
    pub fn finest(&self) -> &PyramidLevel<T> {
        &self.levels[0]
    }
}

/// Flow at the output points of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub source_idx: Vec<usize>,
    pub flow: Vec<Point3<T>>,
    /// Per-point end-point error when ground truth is available.
    pub epe: Option<Vec<T>>,
}

fn compose(outer: &[usize], inner: &[usize]) -> Vec<usize> {
    inner.iter().map(|&i| outer[i]).collect()
}

impl Network {
    pub fn build<T: Real>(cfg: &NetworkConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let w = cfg.pyramid_widths;
        let e = cfg.embed_width;
        let ks = cfg.k_setconv;

        let pyramid = [
            SetConv::new(&mut ps, "sa1", 0, &[w[0], w[0]], ks, rng)?,
            SetConv::new(&mut ps, "sa2", w[0], &[w[1], w[1]], ks, rng)?,
            SetConv::new(&mut ps, "sa3", w[1], &[w[2], w[2]], ks, rng)?,
            SetConv::new(&mut ps, "sa4", w[2], &[w[3], w[3]], ks, rng)?,
        ];
        let fe = AttentiveEmbedding::new(&mut ps, "mix.fe", cfg.embedding, w[2], e, rng)?;
        let agg = SelfAggregation::new(&mut ps, "mix.agg", e, e, cfg.k_reembed, rng)?;
        let mix1 = SetConv::new(&mut ps, "mix.conv1", w[2] + e, &[w[3], w[3]], ks, rng)?;
        let mix2 = SetConv::new(&mut ps, "mix.conv2", w[3], &[w[3], w[3]], ks, rng)?;
        let init_upconv = SetUpconv::new(&mut ps, "init.upconv", w[3], w[3], &[e, e], e, cfg.k_upconv, rng)?;
        let init_flow = Fc::zeroed(&mut ps, "init.flow", e, 3)?;

        let top = match cfg.refinement_design {
            RefinementDesign::FourLayerFull => 0,
            _ => 1,
        };
        let mut refine: [Option<RefineLayer>; 4] = Default::default();
        for l in (top..4).rev() {
            let name = format!("ref{}", l + 1);
            let upconv = if l == 3 {
                None
            } else {
                Some(SetUpconv::new(
                    &mut ps,
                    &format!("{name}.upconv"),
                    e,
                    w[l],
                    &[e, e],
                    e,
                    cfg.k_upconv,
                    rng,
                )?)
            };
            let reembed =
                FlowReembedding::new(&mut ps, &format!("{name}.re"), w[l], e, cfg.k_reembed, cfg.k_reembed, rng)?;
            let encoder = FlowEncoder::new(&mut ps, &format!("{name}.enc"), cfg.enc_width, ks, rng)?;
            let dims = StateDims {
                de: e,
                re: reembed.out_dim(),
                p: w[l],
                f_enc: encoder.out_dim(),
            };
            let predictor = match cfg.predictor_kind {
                PredictorKind::Mlp => Predictor::Mlp(PredictorMlp::new(
                    &mut ps,
                    &format!("{name}.pred"),
                    cfg.predictor_inputs,
                    dims,
                    &[e, e],
                    rng,
                )?),
                PredictorKind::Gru => Predictor::Gru(PredictorGru::new(
                    &mut ps,
                    &format!("{name}.pred"),
                    cfg.predictor_inputs,
                    dims,
                    cfg.k_gru,
                    rng,
                )?),
            };
            refine[l] = Some(RefineLayer {
                upconv,
                reembed,
                encoder,
                predictor,
            });
        }
        let net = Self {
            cfg: cfg.clone(),
            pyramid,
            fe,
            agg,
            mix1,
            mix2,
            init_upconv,
            init_flow,
            refine,
        };
        Ok((net, ps))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        pc1: &[Point3<T>],
        pc2: &[Point3<T>],
    ) -> Result<FlowPyramid<T>> {
        let n = self.cfg.n_input;
        if pc1.len() != n || pc2.len() != n {
            return Err(Error::invalid(format!(
                "network expects {n} points per cloud, got {} and {}",
                pc1.len(),
                pc2.len()
            )));
        }
        let sizes = self.cfg.level_sizes;

        // Feature pyramids. PC1 stops at level 3; level 4 comes from the mixture.
        let mut c1: Vec<Vec<Point3<T>>> = Vec::with_capacity(4);
        let mut idx1: Vec<Vec<usize>> = Vec::with_capacity(4);
        let mut p1: Vec<Var> = Vec::with_capacity(4);
        let mut c2: Vec<Vec<Point3<T>>> = Vec::with_capacity(4);
        let mut q2: Vec<Var> = Vec::with_capacity(4);
        {
            let (mut coords, mut feats, mut src): (Vec<Point3<T>>, Option<Var>, Vec<usize>) =
                (pc1.to_vec(), None, (0..n).collect());
            for l in 0..3 {
                let out = self.pyramid[l].forward(g, ps, &coords, feats, sizes[l])?;
                src = compose(&src, &out.idx);
                coords = out.coords;
                feats = Some(out.feats);
                c1.push(coords.clone());
                idx1.push(src.clone());
                p1.push(out.feats);
            }
            let (mut coords, mut feats) = (pc2.to_vec(), None);
            for l in 0..4 {
                let out = self.pyramid[l].forward(g, ps, &coords, feats, sizes[l])?;
                coords = out.coords;
                feats = Some(out.feats);
                c2.push(coords.clone());
                q2.push(out.feats);
            }
        }

        // All-to-all point mixture at level 3.
        let x3 = g.constant_from(vec![c1[2].len(), 3], c1[2].iter().flatten().copied().collect())?;
        let fe = self.fe.forward(g, ps, x3, p1[2], &c2[2], q2[2])?;
        let emb = self.agg.forward(g, ps, x3, fe.out)?;
        let joined = g.concat(&[p1[2], emb.out])?;
        let m4 = self.mix1.forward(g, ps, &c1[2], Some(joined), sizes[3])?;
        let m4b = self.mix2.forward(g, ps, &m4.coords, Some(m4.feats), sizes[3])?;
        c1.push(m4.coords.clone());
        idx1.push(compose(&idx1[2], &m4.idx));
        p1.push(m4.feats);

        let de4 = self
            .init_upconv
            .forward(g, ps, &c1[3], m4b.feats, &c1[3], Some(m4.feats))?;
        let f_init = self.init_flow.forward(g, ps, de4)?;

        // Refinement, coarse to fine.
        let mut levels: Vec<Option<PyramidLevel<T>>> = vec![None, None, None, None];
        let (mut prev_coords, mut prev_flow, mut prev_de) = (c1[3].clone(), f_init, de4);
        for l in (0..4).rev() {
            let Some(layer) = &self.refine[l] else { continue };
            let de = match &layer.upconv {
                Some(up) => up.forward(g, ps, &prev_coords, prev_de, &c1[l], Some(p1[l]))?,
                None => prev_de,
            };
            let warped = warp(g, &c1[l], &prev_coords, prev_flow)?;
            let (_, re) = layer.reembed.forward(g, ps, warped.coords, p1[l], &c2[l], q2[l])?;
            let f_enc = layer.encoder.forward(g, ps, &c1[l], warped.f_dense)?;
            let state = RefinementState {
                de,
                re: re.out,
                p: p1[l],
                f_dense: warped.f_dense,
                f_enc,
            };
            let (de_new, flow) = match &layer.predictor {
                Predictor::Mlp(m) => m.forward(g, ps, &state)?,
                Predictor::Gru(m) => m.forward(g, ps, &c1[l], &state)?,
            };
            levels[l] = Some(PyramidLevel {
                coords: c1[l].clone(),
                source_idx: idx1[l].clone(),
                flow,
                embedding: Some(de_new),
            });
            prev_coords = c1[l].clone();
            prev_flow = flow;
            prev_de = de_new;
        }

        if levels[0].is_none() {
            let (coords, source_idx) = match self.cfg.refinement_design {
                RefinementDesign::Interp8192 => (pc1.to_vec(), (0..n).collect()),
                _ => (c1[0].clone(), idx1[0].clone()),
            };
            let (nn, w) = three_nn_weights(&coords, &prev_coords)?;
            let flow = g.weighted_gather(prev_flow, &nn, &w, 3)?;
            levels[0] = Some(PyramidLevel {
                coords,
                source_idx,
                flow,
                embedding: None,
            });
        }

        Ok(FlowPyramid {
            levels: levels.into_iter().map(|l| l.expect("every level filled")).collect(),
            initial_flow: f_init,
        })
    }

    /// Finest-level flow for a pair, with per-point errors when `gt` is given.
    pub fn infer<T: Real>(
        &self,
        ps: &ParamStore<T>,
        pc1: &PointCloud<T>,
        pc2: &PointCloud<T>,
        gt: Option<&[Point3<T>]>,
    ) -> Result<Inference<T>> {
        if let Some(gt) = gt {
            if gt.len() != pc1.len() {
                return Err(Error::invalid(format!(
                    "ground truth has {} rows for {} points",
                    gt.len(),
                    pc1.len()
                )));
            }
        }
        let mut g = Graph::new();
        let pyr = self.forward(&mut g, ps, &pc1.coords, &pc2.coords)?;
        let fin = pyr.finest();
        let flow: Vec<Point3<T>> = g.value(fin.flow).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let epe = gt.map(|gt| {
            flow.iter()
                .zip(&fin.source_idx)
                .map(|(f, &i)| norm3(&sub3(f, &gt[i])))
                .collect()
        });
        Ok(Inference {
            source_idx: fin.source_idx.clone(),
            flow,
            epe,
        })
    }

    /// Plain-text parameter ledger: one `name shape count` line per
    /// parameter and a final total.
    pub fn describe<T: Real>(&self, ps: &ParamStore<T>) -> String {
        let mut out = String::new();
        let mut total = 0;
        for (name, p) in ps.iter() {
            let n = p.value.len();
            total += n;
            out.push_str(&format!("{name}\t{:?}\t{n}\n", p.value.shape()));
        }
        out.push_str(&format!("total\t{total}\n"));
        out
    }
}
