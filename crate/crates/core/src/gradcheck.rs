//! Finite-difference audit of every trainable layer and the loss.
//!
//! Each layer is instantiated at the widths of the given network
//! configuration on a small seeded point instance and scored with
//! [`random_probe`]. Zero-initialized flow heads are re-drawn first so
//! their upstream gradients are not trivially zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, random_probe, GradCheckReport, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    AttentiveEmbedding, CandidateMode, EmbeddingConfig, FlowEncoder, FlowReembedding, PredictorGru, PredictorInputs,
    PredictorMlp, RefinementState, SelfAggregation, SetConv, SetUpconv, SimilarityMode, StateDims,
};
use crate::network::{Network, NetworkConfig};
use crate::optim::ParamStore;
use crate::scalar::Point3;
use crate::training::{level_targets, multiscale_loss, LossConfig};

/// Parameter coordinates sampled per tensor.
const PER_PARAM: usize = 24;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: String,
    pub report: GradCheckReport,
}

struct Instance {
    rng: ChaCha8Rng,
}

impl Instance {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn points(&mut self, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                [
                    self.rng.gen_range(-1.0..1.0),
                    self.rng.gen_range(-1.0..1.0),
                    self.rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn tensor(&mut self, r: usize, c: usize) -> Tensor<f64> {
        let data = (0..r * c).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).expect("sized")
    }
}

fn flat(p: &[Point3<f64>]) -> Tensor<f64> {
    Tensor::new(vec![p.len(), 3], p.iter().flatten().copied().collect()).expect("sized")
}

/// Re-draws every all-zero parameter tensor from U(-0.1, 0.1).
pub fn randomize_zero_params(ps: &mut ParamStore<f64>, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in names {
        let t = ps.value_mut(&name)?;
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    Ok(())
}

fn both(
    ps: &mut ParamStore<f64>,
    eps: f64,
    seed: u64,
    params: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    input: Option<(&Tensor<f64>, &dyn Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var>)>,
) -> Result<GradCheckReport> {
    let mut report = grad_check_params(ps, params, eps, PER_PARAM, seed)?;
    if let Some((x, f)) = input {
        let ps = &*ps;
        report.merge(grad_check(|g, v| f(g, ps, v), x, eps)?);
    }
    Ok(report)
}

/// Runs the whole audit. `n` is the instance size (8 to 32 points).
pub fn run_suite(cfg: &NetworkConfig, n: usize, eps: f64, seed: u64) -> Result<Vec<LayerCheck>> {
    if !(8..=32).contains(&n) {
        return Err(Error::Config(format!("gradcheck.points = {n}: instances have 8 to 32 points")));
    }
    let mut out = vec![];
    let mut push = |layer: String, report: GradCheckReport| out.push(LayerCheck { layer, report });
    let w = cfg.pyramid_widths;
    let e = cfg.embed_width;
    let k = n / 4;

    // set conv: level 3 widths, downsampling n -> n/2
    {
        let mut inst = Instance::new(seed);
        let mut ps = ParamStore::new();
        let conv = SetConv::new(&mut ps, "set_conv", w[1], &[w[2], w[2]], k, &mut inst.rng)?;
        let pts = inst.points(n);
        let f = inst.tensor(n, w[1]);
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, x: Var| -> Result<Var> {
            let o = conv.forward(g, ps, &pts, Some(x), n / 2)?;
            random_probe(g, o.feats, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let x = g.constant(f.clone()); fwd(g, ps, x) }, Some((&f, &fwd)))?;
        push("set_conv".into(), r);
    }

    // all-to-all embedding in every similarity mode, with and without backward validation
    for sim in SimilarityMode::ALL {
        for bv in [true, false] {
            let mut inst = Instance::new(seed + 1);
            let mut ps = ParamStore::new();
            let ecfg = EmbeddingConfig {
                similarity: sim,
                backward_validation: bv,
                candidates: CandidateMode::AllToAll,
            };
            let fe = AttentiveEmbedding::new(&mut ps, "fe", ecfg, w[2], e, &mut inst.rng)?;
            let x1 = flat(&inst.points(n));
            let y2 = inst.points(n);
            let p1 = inst.tensor(n, w[2]);
            let q2 = inst.tensor(n, w[2]);
            let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, p: Var| -> Result<Var> {
                let x = g.constant(x1.clone());
                let q = g.input(q2.clone());
                let tr = fe.forward(g, ps, x, p, &y2, q)?;
                random_probe(g, tr.out, seed)
            };
            let r = both(&mut ps, eps, seed, |g, ps| { let p = g.constant(p1.clone()); fwd(g, ps, p) }, Some((&p1, &fwd)))?;
            push(format!("embedding[{sim}, backward_validation={bv}]"), r);
        }
    }

    // second attentive aggregation
    {
        let mut inst = Instance::new(seed + 2);
        let mut ps = ParamStore::new();
        let agg = SelfAggregation::new(&mut ps, "agg", e, e, k, &mut inst.rng)?;
        let x1 = flat(&inst.points(n));
        let fe = inst.tensor(n, e);
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, v: Var| -> Result<Var> {
            let x = g.constant(x1.clone());
            let tr = agg.forward(g, ps, x, v)?;
            random_probe(g, tr.out, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let v = g.constant(fe.clone()); fwd(g, ps, v) }, Some((&fe, &fwd)))?;
        push("self_aggregation".into(), r);
    }

    // set upconv from n/2 sparse to n dense points
    {
        let mut inst = Instance::new(seed + 3);
        let mut ps = ParamStore::new();
        let up = SetUpconv::new(&mut ps, "upconv", e, w[1], &[e, e], e, k, &mut inst.rng)?;
        let sparse = inst.points(n / 2);
        let dense = inst.points(n);
        let sf = inst.tensor(n / 2, e);
        let df = inst.tensor(n, w[1]);
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, s: Var| -> Result<Var> {
            let d = g.input(df.clone());
            let o = up.forward(g, ps, &sparse, s, &dense, Some(d))?;
            random_probe(g, o, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let s = g.constant(sf.clone()); fwd(g, ps, s) }, Some((&sf, &fwd)))?;
        push("set_upconv".into(), r);
    }

    // attentive re-embedding, differentiated through the warped coordinates
    {
        let mut inst = Instance::new(seed + 4);
        let mut ps = ParamStore::new();
        let re = FlowReembedding::new(&mut ps, "re", w[1], e, k, k, &mut inst.rng)?;
        let x1 = flat(&inst.points(n));
        let y2 = inst.points(n);
        let p1 = inst.tensor(n, w[1]);
        let q2 = inst.tensor(n, w[1]);
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, x: Var| -> Result<Var> {
            let p = g.input(p1.clone());
            let q = g.input(q2.clone());
            let (_, tr) = re.forward(g, ps, x, p, &y2, q)?;
            random_probe(g, tr.out, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let x = g.constant(x1.clone()); fwd(g, ps, x) }, Some((&x1, &fwd)))?;
        push("reembedding".into(), r);
    }

    // flow encoder
    {
        let mut inst = Instance::new(seed + 5);
        let mut ps = ParamStore::new();
        let enc = FlowEncoder::new(&mut ps, "enc", cfg.enc_width, k, &mut inst.rng)?;
        let pts = inst.points(n);
        let flow = inst.tensor(n, 3);
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, f: Var| -> Result<Var> {
            let o = enc.forward(g, ps, &pts, f)?;
            random_probe(g, o, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let f = g.constant(flow.clone()); fwd(g, ps, f) }, Some((&flow, &fwd)))?;
        push("flow_encoder".into(), r);
    }

    // both predictors
    let dims = StateDims {
        de: e,
        re: e,
        p: w[1],
        f_enc: cfg.enc_width,
    };
    for gru in [false, true] {
        let mut inst = Instance::new(seed + 6);
        let mut ps = ParamStore::new();
        let inputs = PredictorInputs::default();
        let mlp;
        let gru_l;
        if gru {
            gru_l = Some(PredictorGru::new(&mut ps, "pred", inputs, dims, k, &mut inst.rng)?);
            mlp = None;
        } else {
            mlp = Some(PredictorMlp::new(&mut ps, "pred", inputs, dims, &[e, e], &mut inst.rng)?);
            gru_l = None;
        }
        randomize_zero_params(&mut ps, seed)?;
        let pts = inst.points(n);
        let st = [
            inst.tensor(n, e),
            inst.tensor(n, e),
            inst.tensor(n, w[1]),
            inst.tensor(n, 3),
            inst.tensor(n, cfg.enc_width),
        ];
        let fwd = |g: &mut Graph<f64>, ps: &ParamStore<f64>, de: Var| -> Result<Var> {
            let s = RefinementState {
                de,
                re: g.input(st[1].clone()),
                p: g.input(st[2].clone()),
                f_dense: g.input(st[3].clone()),
                f_enc: g.input(st[4].clone()),
            };
            let (h, f) = match (&mlp, &gru_l) {
                (Some(m), _) => m.forward(g, ps, &s)?,
                (_, Some(m)) => m.forward(g, ps, &pts, &s)?,
                _ => unreachable!(),
            };
            let both = g.concat(&[h, f])?;
            random_probe(g, both, seed)
        };
        let r = both(&mut ps, eps, seed, |g, ps| { let d = g.constant(st[0].clone()); fwd(g, ps, d) }, Some((&st[0], &fwd)))?;
        push(if gru { "predictor_gru" } else { "predictor_mlp" }.into(), r);
    }

    // multiscale loss with a partial mask
    {
        let mut inst = Instance::new(seed + 7);
        let sizes = [n, n * 3 / 4, n / 2, n / 4];
        let gt: Vec<Vec<Point3<f64>>> = sizes.iter().map(|&s| inst.points(s)).collect();
        let masks: Vec<Vec<bool>> = sizes.iter().map(|&s| (0..s).map(|i| i % 4 != 3).collect()).collect();
        let total: usize = sizes.iter().sum();
        let x = Tensor::new(vec![total * 3], inst.tensor(total, 3).data().to_vec())?;
        let r = grad_check(
            |g, v| {
                let mut flows = vec![];
                let mut start = 0;
                for &s in &sizes {
                    let part = g.slice_last(v, start, 3 * s)?;
                    flows.push(g.reshape(part, vec![s, 3])?);
                    start += 3 * s;
                }
                multiscale_loss(g, &flows, &gt, Some(&masks), &LossConfig::default())
            },
            &x,
            eps,
        )?;
        push("multiscale_loss".into(), r);
    }

    // the assembled network on an n-point scene, through the training loss
    {
        let n4 = (n / 4).max(3);
        let kmax = n4;
        let net_cfg = NetworkConfig {
            n_input: n,
            level_sizes: [n, n * 3 / 4, (n / 2).max(n4 + 1), n4],
            k_setconv: cfg.k_setconv.min(kmax),
            k_upconv: cfg.k_upconv.min(kmax),
            k_reembed: cfg.k_reembed.min(kmax),
            k_gru: cfg.k_gru.min(kmax),
            ..cfg.clone()
        };
        let (net, mut ps) = Network::build::<f64>(&net_cfg)?;
        randomize_zero_params(&mut ps, seed)?;
        let mut inst = Instance::new(seed + 8);
        let pc1: Vec<Point3<f64>> = inst.points(n);
        let gt: Vec<Point3<f64>> = inst.points(n).iter().map(|p| p.map(|v| 0.2 * v)).collect();
        let pc2: Vec<Point3<f64>> = pc1.iter().zip(&gt).map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]]).collect();
        let mask = vec![true; n];
        let r = grad_check_params(
            &mut ps,
            |g, ps| {
                let pyr = net.forward(g, ps, &pc1, &pc2)?;
                let (gtl, masks) = level_targets(&pyr, &gt, &mask);
                let flows: Vec<Var> = pyr.levels.iter().map(|l| l.flow).collect();
                multiscale_loss(g, &flows, &gtl, Some(&masks), &LossConfig::default())
            },
            eps,
            4,
            seed,
        )?;
        push("network".into(), r);
    }
    Ok(out)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Plain-text table: `layer max_rel_err checked skipped status`.
pub fn format_table(rows: &[LayerCheck]) -> String {
    let width = rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:width$}  {:>12}  {:>7}  {:>7}  status\n", "layer", "max_rel_err", "checked", "skipped");
    for r in rows {
        let ok = r.report.max_rel_err < GRADCHECK_TOLERANCE && r.report.checked > 0;
        s.push_str(&format!(
            "{:width$}  {:>12.3e}  {:>7}  {:>7}  {}\n",
            r.layer,
            r.report.max_rel_err,
            r.report.checked,
            r.report.skipped,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_layer_and_passes_on_a_tiny_config() {
        let cfg = NetworkConfig {
            pyramid_widths: [4, 4, 6, 8],
            embed_width: 6,
            enc_width: 4,
            ..NetworkConfig::desk()
        };
        let rows = run_suite(&cfg, 8, 1e-4, 3).unwrap();
        assert_eq!(rows.len(), 1 + 8 + 1 + 1 + 1 + 1 + 2 + 1 + 1);
        for r in &rows {
            assert!(r.report.checked > 0, "{}", r.layer);
            assert!(r.report.max_rel_err < GRADCHECK_TOLERANCE, "{}: {:?}", r.layer, r.report);
        }
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), rows.len() + 1);
        assert!(!t.contains("FAIL"));
    }

    #[test]
    fn instance_size_is_bounded() {
        assert!(run_suite(&NetworkConfig::desk(), 4, 1e-4, 0).is_err());
        assert!(run_suite(&NetworkConfig::desk(), 64, 1e-4, 0).is_err());
    }
}
