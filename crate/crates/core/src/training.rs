//! Multi-scale loss, learning-rate schedule and the training loop.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::network::{FlowPyramid, Network};
use crate::optim::{AdamConfig, ParamStore};
use crate::scalar::{norm3, sub3, Point3, Real};

pub const DEFAULT_PSI: [f64; 4] = [0.02, 0.04, 0.08, 0.16];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    None,
    #[default]
    ExcludeInvalid,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::None => "none",
            MaskMode::ExcludeInvalid => "exclude_invalid",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "exclude_invalid" => Ok(MaskMode::ExcludeInvalid),
            _ => Err(Error::Config(format!("unknown mask mode `{s}` (none, exclude_invalid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Level weights, finest first.
    pub psi: [f64; 4],
    pub mask_mode: MaskMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            psi: DEFAULT_PSI,
            mask_mode: MaskMode::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.psi.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Config(format!("loss.psi must be positive, got {p}")));
        }
        Ok(())
    }
}

/// `Σ_l ψ_l / N_l Σ_i ‖f_i − gt_i‖` over the given levels (finest first).
/// With `MaskMode::ExcludeInvalid`, masked-out rows are dropped from the sum
/// and from `N_l`; a level without valid rows contributes zero.
pub fn multiscale_loss<T: Real>(
    g: &mut Graph<T>,
    flows: &[Var],
    gt: &[Vec<Point3<T>>],
    masks: Option<&[Vec<bool>]>,
    cfg: &LossConfig,
) -> Result<Var> {
    if flows.len() != cfg.psi.len() || gt.len() != flows.len() {
        return Err(Error::invalid(format!(
            "loss needs {} levels, got {} predictions and {} ground-truth sets",
            cfg.psi.len(),
            flows.len(),
            gt.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != flows.len() {
            return Err(Error::invalid(format!("{} mask levels for {} levels", m.len(), flows.len())));
        }
    }
    let mut total: Option<Var> = None;
    for (l, (&f, gt_l)) in flows.iter().zip(gt).enumerate() {
        let n = gt_l.len();
        if g.shape(f) != [n, 3] {
            return Err(Error::Shape {
                op: "multiscale_loss",
                left: g.shape(f).to_vec(),
                right: vec![n, 3],
            });
        }
        let valid: Vec<bool> = match (cfg.mask_mode, masks) {
            (MaskMode::ExcludeInvalid, Some(m)) => {
                if m[l].len() != n {
                    return Err(Error::invalid(format!("level {} mask has {} rows for {n} points", l + 1, m[l].len())));
                }
                m[l].clone()
            }
            _ => vec![true; n],
        };
        let count = valid.iter().filter(|&&v| v).count();
        let w = if count == 0 {
            T::zero()
        } else {
            T::lit(cfg.psi[l]) / T::from_usize(count).unwrap()
        };
        let weights: Vec<T> = valid.iter().map(|&v| if v { w } else { T::zero() }).collect();
        let target = g.constant_from(vec![n, 3], gt_l.iter().flatten().copied().collect())?;
        let diff = g.sub(f, target)?;
        let norms = g.row_norm(diff);
        let term = g.weighted_sum(norms, &weights)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("four levels"))
}

/// Ground truth and masks at each pyramid level by index inheritance.
pub fn level_targets<T: Real>(
    pyr: &FlowPyramid<T>,
    gt_flow: &[Point3<T>],
    mask: &[bool],
) -> (Vec<Vec<Point3<T>>>, Vec<Vec<bool>>) {
    let gt = pyr
        .levels
        .iter()
        .map(|l| l.source_idx.iter().map(|&i| gt_flow[i]).collect())
        .collect();
    let masks = pyr
        .levels
        .iter()
        .map(|l| l.source_idx.iter().map(|&i| mask[i]).collect())
        .collect();
    (gt, masks)
}

/// Loss of one pair plus per-level mean EPE over valid points.
pub fn pair_loss<T: Real>(
    g: &mut Graph<T>,
    net: &Network,
    ps: &ParamStore<T>,
    pair: &ScenePair<T>,
    cfg: &LossConfig,
) -> Result<(Var, [f64; 4])> {
    let pyr = net.forward(g, ps, &pair.pc1.coords, &pair.pc2.coords)?;
    let (gt, masks) = level_targets(&pyr, &pair.gt_flow, &pair.mask);
    let flows: Vec<Var> = pyr.levels.iter().map(|l| l.flow).collect();
    let loss = multiscale_loss(g, &flows, &gt, Some(&masks), cfg)?;
    let mut epe = [0.0; 4];
    for l in 0..4 {
        let pred = g.value(flows[l]);
        let (mut sum, mut count) = (0.0, 0usize);
        for (i, t) in gt[l].iter().enumerate() {
            if cfg.mask_mode == MaskMode::ExcludeInvalid && !masks[l][i] {
                continue;
            }
            let p = [pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]];
            sum += norm3(&sub3(&p, t)).to_f64_lossless();
            count += 1;
        }
        epe[l] = if count == 0 { 0.0 } else { sum / count as f64 };
    }
    Ok((loss, epe))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub decay_every: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// First epoch index; nonzero when resuming, so the schedule continues.
    pub start_epoch: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs (0: final only).
    pub save_every: usize,
    /// Re-draw an independent random point order for both clouds of every
    /// sample each epoch.
    pub shuffle_points: bool,
    /// Augmentation: rotation about the vertical axis drawn from
    /// `[-a, a]` radians, applied to both clouds.
    pub augment_rotation: f64,
    /// Augmentation: common shift of both clouds, each axis in `[-s, s]`.
    pub augment_shift: f64,
    /// Augmentation: extra translation of PC2 only (a global camera motion
    /// added to the flow), each axis in `[-e, e]`.
    pub augment_ego: f64,
    /// Augment only epochs before this index (0: every epoch).
    pub augment_until: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            gamma: 0.5,
            decay_every: 80,
            adam: AdamConfig::default(),
            batch_size: 2,
            epochs: 300,
            start_epoch: 0,
            seed: 0,
            save_every: 0,
            shuffle_points: true,
            augment_rotation: 0.0,
            augment_shift: 0.0,
            augment_ego: 0.0,
            augment_until: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, v: String| Err(Error::Config(format!("{k}: invalid value {v}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("train.lr0", self.lr0.to_string());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma", self.gamma.to_string());
        }
        if self.decay_every == 0 {
            return bad("train.decay_every", "0".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "0".into());
        }
        for (k, b) in [("train.beta1", self.adam.beta1), ("train.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(k, b.to_string());
            }
        }
        for (k, a) in [
            ("train.augment_rotation", self.augment_rotation),
            ("train.augment_shift", self.augment_shift),
            ("train.augment_ego", self.augment_ego),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(k, a.to_string());
            }
        }
        if !(self.adam.eps > 0.0) {
            return bad("train.adam_eps", self.adam.eps.to_string());
        }
        Ok(())
    }
}

impl TrainConfig {
    fn augments(&self, epoch: usize) -> bool {
        let on = self.augment_rotation > 0.0 || self.augment_shift > 0.0 || self.augment_ego > 0.0;
        on && (self.augment_until == 0 || epoch < self.augment_until)
    }
}

/// Seeded random rigid copy of a pair per the augmentation settings.
pub fn augment<T: Real>(pair: &ScenePair<T>, tc: &TrainConfig, seed: u64) -> ScenePair<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    let mut draw = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let angle = draw(tc.augment_rotation);
    let t1 = [draw(tc.augment_shift), draw(tc.augment_shift), draw(tc.augment_shift)];
    let ego = [draw(tc.augment_ego), draw(tc.augment_ego), draw(tc.augment_ego)];
    pair.transformed(angle, t1, [t1[0] + ego[0], t1[1] + ego[1], t1[2] + ego[2]])
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean EPE per level, finest first, measured before each step.
    pub level_epe: [f64; 4],
}

pub const LOSS_CSV_HEADER: &str = "epoch,lr,mean_loss,epe_l1,epe_l2,epe_l3,epe_l4";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let e = self.level_epe;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch, self.lr, self.mean_loss, e[0], e[1], e[2], e[3]
        )
    }
}

pub fn write_loss_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(LOSS_CSV_HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.bin"))
}

/// Where `train` writes its files; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains `ps` in place. Per epoch the sample order is a seeded shuffle;
/// each batch accumulates `1/B`-scaled gradients before one Adam step. When
/// an output directory is given, `loss.csv` is rewritten after every epoch
/// and checkpoints are written every `save_every` epochs and at the end.
pub fn train<T: Real>(
    net: &Network,
    ps: &mut ParamStore<T>,
    data: &[ScenePair<T>],
    tc: &TrainConfig,
    lc: &LossConfig,
    out: &TrainOutput,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    tc.validate()?;
    lc.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = net.cfg.n_input;
    if let Some((i, p)) = data
        .iter()
        .enumerate()
        .find(|(_, p)| p.pc1.len() < n || p.pc2.len() < n)
    {
        return Err(Error::invalid(format!(
            "training pair {i} has {} / {} points; the network needs {n}",
            p.pc1.len(),
            p.pc2.len()
        )));
    }
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut log = Vec::with_capacity(tc.epochs);
    let end = tc.start_epoch + tc.epochs;
    for epoch in tc.start_epoch..end {
        let lr = lr_at(epoch, tc);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(tc.seed, epoch as u64, 0)));
        let (mut loss_sum, mut epe_sum) = (0.0, [0.0; 4]);
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            ps.zero_grads();
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            let augmenting = tc.augments(epoch);
            for &i in batch {
                let sample_seed = mix(tc.seed, epoch as u64, i as u64 + 1);
                let prepared;
                let pair = if tc.shuffle_points || augmenting || data[i].pc1.len() != n || data[i].pc2.len() != n {
                    let mut p = data[i].resample(n, sample_seed)?;
                    if augmenting {
                        p = augment(&p, tc, sample_seed);
                    }
                    prepared = p;
                    &prepared
                } else {
                    &data[i]
                };
                let mut g = Graph::new();
                let (loss, epe) = pair_loss(&mut g, net, ps, pair, lc).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Numerical {
                        epoch,
                        batch: b,
                        msg: format!("non-finite {what} on sample {i}"),
                    },
                    e => e,
                })?;
                let lv = g.value(loss)[0].to_f64_lossless();
                if !lv.is_finite() {
                    return Err(Error::Numerical {
                        epoch,
                        batch: b,
                        msg: format!("loss is {lv} on sample {i}"),
                    });
                }
                g.backprop(loss)?;
                ps.accumulate_grads(&g, scale)?;
                loss_sum += lv;
                for l in 0..4 {
                    epe_sum[l] += epe[l];
                }
            }
            ps.adam_step(lr, &tc.adam)?;
        }
        let m = data.len() as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / m,
            level_epe: epe_sum.map(|e| e / m),
        };
        on_epoch(&rec);
        log.push(rec);
        if let Some(dir) = &out.dir {
            write_loss_csv(&dir.join("loss.csv"), &log)?;
            let done = epoch + 1 - tc.start_epoch;
            if (tc.save_every > 0 && done % tc.save_every == 0) || epoch + 1 == end {
                ps.save(&checkpoint_path(dir, epoch + 1))?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        let mut f = std::fs::File::create(dir.join("final.bin")).map_err(|e| Error::io(dir, e))?;
        f.write_all(&ps.to_bytes()).map_err(|e| Error::io(dir, e))?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::{generate, SceneGenConfig};
    use crate::network::NetworkConfig;
    use proptest::prelude::*;

    fn flows(g: &mut Graph<f64>, rows: &[Vec<Point3<f64>>]) -> Vec<Var> {
        rows.iter()
            .map(|r| {
                let t = Tensor::new(vec![r.len(), 3], r.iter().flatten().copied().collect()).unwrap();
                g.input(t)
            })
            .collect()
    }

    fn levels(seed: u64) -> (Vec<Vec<Point3<f64>>>, Vec<Vec<Point3<f64>>>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |n: usize| -> Vec<Point3<f64>> {
            (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
        };
        let pred = vec![mk(8), mk(4), mk(2), mk(1)];
        let gt = vec![mk(8), mk(4), mk(2), mk(1)];
        (pred, gt)
    }

    #[test]
    fn three_four_five() {
        let mut g = Graph::new();
        let pred = vec![vec![[3.0, 4.0, 0.0]], vec![[0.0; 3]], vec![[0.0; 3]], vec![[0.0; 3]]];
        let gt = vec![vec![[0.0; 3]]; 4];
        let f = flows(&mut g, &pred);
        let loss = multiscale_loss(&mut g, &f, &gt, None, &LossConfig::default()).unwrap();
        assert_eq!(g.value(loss)[0], 0.1);
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let (_, gt) = levels(1);
        let mut g = Graph::new();
        let f = flows(&mut g, &gt);
        let loss = multiscale_loss(&mut g, &f, &gt, None, &LossConfig::default()).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
        g.backprop(loss).unwrap();
        assert!(f.iter().all(|&v| g.grad(v).unwrap().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn all_masked_gives_zero_loss_and_gradient() {
        let (pred, gt) = levels(2);
        let masks: Vec<Vec<bool>> = gt.iter().map(|l| vec![false; l.len()]).collect();
        let mut g = Graph::new();
        let f = flows(&mut g, &pred);
        let loss = multiscale_loss(&mut g, &f, &gt, Some(&masks), &LossConfig::default()).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
        g.backprop(loss).unwrap();
        assert!(f.iter().all(|&v| g.grad(v).unwrap().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn mask_mode_none_ignores_masks() {
        let (pred, gt) = levels(3);
        let masks: Vec<Vec<bool>> = gt.iter().map(|l| vec![false; l.len()]).collect();
        let cfg = LossConfig {
            mask_mode: MaskMode::None,
            ..Default::default()
        };
        let mut g = Graph::new();
        let f = flows(&mut g, &pred);
        let a = multiscale_loss(&mut g, &f, &gt, Some(&masks), &cfg).unwrap();
        let b = multiscale_loss(&mut g, &f, &gt, None, &cfg).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn masked_rows_leave_the_count() {
        let mut g = Graph::new();
        let pred = vec![
            vec![[1.0, 0.0, 0.0], [9.0, 0.0, 0.0]],
            vec![[0.0; 3]],
            vec![[0.0; 3]],
            vec![[0.0; 3]],
        ];
        let gt = vec![vec![[0.0; 3]; 2], vec![[0.0; 3]], vec![[0.0; 3]], vec![[0.0; 3]]];
        let masks = vec![vec![true, false], vec![true], vec![true], vec![true]];
        let f = flows(&mut g, &pred);
        let loss = multiscale_loss(&mut g, &f, &gt, Some(&masks), &LossConfig::default()).unwrap();
        assert_eq!(g.value(loss)[0], 0.02);
    }

    #[test]
    fn level_count_mismatch() {
        let (pred, gt) = levels(4);
        let mut g = Graph::new();
        let f = flows(&mut g, &pred[..3]);
        assert!(multiscale_loss(&mut g, &f, &gt[..3], None, &LossConfig::default()).is_err());
        let f = flows(&mut g, &pred);
        assert!(multiscale_loss(&mut g, &f, &gt[..3], None, &LossConfig::default()).is_err());
    }

    #[test]
    fn loss_gradient_check() {
        let (pred, gt) = levels(5);
        let sizes: Vec<usize> = pred.iter().map(Vec::len).collect();
        let flat: Vec<f64> = pred.iter().flatten().flatten().copied().collect();
        let x = Tensor::new(vec![flat.len()], flat).unwrap();
        let masks: Vec<Vec<bool>> = sizes.iter().map(|&n| (0..n).map(|i| i % 3 != 1).collect()).collect();
        let report = crate::autodiff::grad_check(
            |g, v| {
                let mut f = vec![];
                let mut start = 0;
                for &n in &sizes {
                    let s = g.slice_last(v, start, 3 * n)?;
                    f.push(g.reshape(s, vec![n, 3])?);
                    start += 3 * n;
                }
                multiscale_loss(g, &f, &gt, Some(&masks), &LossConfig::default())
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.001);
        assert_eq!(lr_at(79, &c), 0.001);
        assert_eq!(lr_at(80, &c), 0.0005);
        assert_eq!(lr_at(160, &c), 0.00025);
        assert!((0..500).all(|e| lr_at(e + 1, &c) <= lr_at(e, &c)));
    }

    #[test]
    fn augmentation_window() {
        let off = TrainConfig { augment_until: 5, ..Default::default() };
        assert!(!off.augments(0));
        let c = TrainConfig { augment_shift: 0.1, ..Default::default() };
        assert!(c.augments(0) && c.augments(10_000));
        let c = TrainConfig { augment_until: 5, ..c };
        assert!(c.augments(4) && !c.augments(5));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { psi: [0.1, 0.0, 0.1, 0.1], ..Default::default() }.validate().is_err());
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            n_input: 64,
            level_sizes: [32, 16, 8, 4],
            pyramid_widths: [4, 4, 8, 8],
            embed_width: 6,
            enc_width: 4,
            k_setconv: 4,
            k_upconv: 3,
            k_reembed: 4,
            k_gru: 3,
            ..NetworkConfig::desk()
        }
    }

    fn pairs(n: usize) -> Vec<ScenePair<f64>> {
        (0..n)
            .map(|s| {
                generate(&SceneGenConfig {
                    n_points: 64,
                    seed: s as u64,
                    occlusion_fraction: 0.1,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn one_sample_one_step() {
        let (net, mut ps) = Network::build::<f64>(&tiny()).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        let log = train(&net, &mut ps, &pairs(1), &tc, &LossConfig::default(), &TrainOutput::default(), &mut |_| {}).unwrap();
        assert_eq!(ps.step_count(), 1);
        assert_eq!(log.len(), 1);
        let (_, mut ps) = Network::build::<f64>(&tiny()).unwrap();
        let tc = TrainConfig { epochs: 2, batch_size: 2, ..tc };
        train(&net, &mut ps, &pairs(3), &tc, &LossConfig::default(), &TrainOutput::default(), &mut |_| {}).unwrap();
        assert_eq!(ps.step_count(), 4);
    }

    #[test]
    fn repeat_runs_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { epochs: 2, save_every: 1, ..Default::default() };
        let mut bytes = vec![];
        let mut csv = vec![];
        for run in 0..2 {
            let out = TrainOutput {
                dir: Some(dir.path().join(format!("run{run}"))),
            };
            let (net, mut ps) = Network::build::<f64>(&tiny()).unwrap();
            train(&net, &mut ps, &pairs(3), &tc, &LossConfig::default(), &out, &mut |_| {}).unwrap();
            let d = out.dir.unwrap();
            assert!(checkpoint_path(&d, 1).exists());
            bytes.push(std::fs::read(d.join("final.bin")).unwrap());
            csv.push(std::fs::read_to_string(d.join("loss.csv")).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
        assert_eq!(csv[0], csv[1]);
        assert_eq!(csv[0].lines().count(), 3);
        assert_eq!(csv[0].lines().next().unwrap(), LOSS_CSV_HEADER);
    }

    #[test]
    fn resuming_continues_the_schedule() {
        let (net, mut a) = Network::build::<f64>(&tiny()).unwrap();
        let data = pairs(2);
        let lc = LossConfig::default();
        let tc = TrainConfig { epochs: 2, ..Default::default() };
        train(&net, &mut a, &data, &tc, &lc, &TrainOutput::default(), &mut |_| {}).unwrap();

        let (_, mut b) = Network::build::<f64>(&tiny()).unwrap();
        let first = TrainConfig { epochs: 1, ..tc.clone() };
        train(&net, &mut b, &data, &first, &lc, &TrainOutput::default(), &mut |_| {}).unwrap();
        let mut b = ParamStore::from_bytes(&b.to_bytes()).unwrap();
        let second = TrainConfig { epochs: 1, start_epoch: 1, ..tc };
        train(&net, &mut b, &data, &second, &lc, &TrainOutput::default(), &mut |_| {}).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let (net, mut ps) = Network::build::<f64>(&tiny()).unwrap();
        let name = ps.names().next().unwrap().to_string();
        ps.value_mut(&name).unwrap().data_mut()[0] = f64::NAN;
        let err = train(&net, &mut ps, &pairs(2), &TrainConfig::default(), &LossConfig::default(), &TrainOutput::default(), &mut |_| {})
            .unwrap_err();
        assert!(matches!(err, Error::Numerical { epoch: 0, batch: 0, .. }), "{err:?}");
    }

    #[test]
    fn rejects_bad_datasets() {
        let (net, mut ps) = Network::build::<f64>(&tiny()).unwrap();
        let lc = LossConfig::default();
        let tc = TrainConfig::default();
        assert!(train(&net, &mut ps, &[], &tc, &lc, &TrainOutput::default(), &mut |_| {}).is_err());
        let small = generate::<f64>(&SceneGenConfig { n_points: 10, ..Default::default() }).unwrap();
        assert!(train(&net, &mut ps, &[small], &tc, &lc, &TrainOutput::default(), &mut |_| {}).is_err());
    }

    #[test]
    fn inherited_targets_follow_source_indices() {
        let (net, ps) = Network::build::<f64>(&tiny()).unwrap();
        let p = &pairs(1)[0];
        let mut g = Graph::new();
        let pyr = net.forward(&mut g, &ps, &p.pc1.coords, &p.pc2.coords).unwrap();
        let (gt, masks) = level_targets(&pyr, &p.gt_flow, &p.mask);
        for (l, lvl) in pyr.levels.iter().enumerate() {
            for (j, &i) in lvl.source_idx.iter().enumerate() {
                assert_eq!(lvl.coords[j], p.pc1.coords[i]);
                assert_eq!(gt[l][j], p.gt_flow[i]);
                assert_eq!(masks[l][j], p.mask[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_properties(seed in 0u64..10_000) {
            let (pred, gt) = levels(seed);
            let cfg = LossConfig::default();
            let all: Vec<Vec<bool>> = gt.iter().map(|l| vec![true; l.len()]).collect();
            let mut g = Graph::new();
            let f = flows(&mut g, &pred);
            let masked = multiscale_loss(&mut g, &f, &gt, Some(&all), &cfg).unwrap();
            let plain = multiscale_loss(&mut g, &f, &gt, None, &cfg).unwrap();
            prop_assert_eq!(g.value(masked)[0].to_bits(), g.value(plain)[0].to_bits());
            prop_assert!(g.value(plain)[0] > 0.0);
            g.backprop(plain).unwrap();
            for (l, &v) in f.iter().enumerate() {
                let n = gt[l].len();
                let bound = cfg.psi[l] / n as f64;
                for row in g.grad(v).unwrap().chunks(3) {
                    let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
                    prop_assert!(norm <= bound * (1.0 + 1e-12));
                }
            }
        }
    }
}
