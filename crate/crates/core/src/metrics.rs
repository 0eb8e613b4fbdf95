//! End-point error, accuracy and outlier rates, with optional image-plane
//! variants through a pinhole camera.

use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::ParamStore;
use crate::scalar::{add3, norm3, sub3, Point3, Real};

/// Thresholds in one place; meters, pixels or ratios.
pub mod thresholds {
    pub const STRICT_ABS: f64 = 0.05;
    pub const STRICT_REL: f64 = 0.05;
    pub const RELAX_ABS: f64 = 0.1;
    pub const RELAX_REL: f64 = 0.1;
    pub const OUTLIER_ABS: f64 = 0.3;
    pub const OUTLIER_REL: f64 = 0.1;
    pub const ACC2D_PX: f64 = 3.0;
    pub const ACC2D_REL: f64 = 0.05;
    /// Floor on the ground-truth norm in relative errors.
    pub const REL_GUARD: f64 = 1e-12;
}

use thresholds::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Pinhole {
    fn default() -> Self {
        Self {
            focal: 1050.0,
            cx: 479.5,
            cy: 269.5,
        }
    }
}

impl Pinhole {
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::invalid(format!("cannot project point with depth {}", p[2])));
        }
        Ok([self.focal * p[0] / p[2] + self.cx, self.focal * p[1] / p[2] + self.cy])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe3d: f64,
    pub acc3d_strict: f64,
    pub acc3d_relax: f64,
    pub outliers3d: f64,
    pub epe2d: Option<f64>,
    pub acc2d: Option<f64>,
    pub n_evaluated: usize,
}

pub const METRIC_CSV_HEADER: &str = "epe3d,acc3d_strict,acc3d_relax,outliers3d,epe2d,acc2d,n_evaluated";

impl MetricReport {
    /// `epe3d,acc3d_strict,acc3d_relax,outliers3d,epe2d,acc2d` with empty
    /// 2D fields when absent.
    pub fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{:e},{:e},{:e},{:e},{},{}",
            self.epe3d,
            self.acc3d_strict,
            self.acc3d_relax,
            self.outliers3d,
            opt(self.epe2d),
            opt(self.acc2d)
        )
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "EPE3D {:.6} m  Acc3DS {:.4}  Acc3DR {:.4}  Outliers3D {:.4}",
            self.epe3d, self.acc3d_strict, self.acc3d_relax, self.outliers3d
        )?;
        if let (Some(e), Some(a)) = (self.epe2d, self.acc2d) {
            write!(f, "  EPE2D {e:.4} px  Acc2D {a:.4}")?;
        }
        write!(f, "  ({} points)", self.n_evaluated)
    }
}

/// Image-plane inputs: the camera and the PC1 points the flow starts from.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'a, T> {
    pub camera: Pinhole,
    pub pc1: &'a [Point3<T>],
}

pub fn evaluate<T: Real>(
    pred: &[Point3<T>],
    gt: &[Point3<T>],
    mask: Option<&[bool]>,
    projection: Option<Projection<'_, T>>,
) -> Result<MetricReport> {
    let n = pred.len();
    if gt.len() != n {
        return Err(Error::invalid(format!("{n} predictions for {} ground-truth rows", gt.len())));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::invalid(format!("mask has {} rows for {n} points", m.len())));
        }
    }
    if let Some(p) = &projection {
        if p.pc1.len() != n {
            return Err(Error::invalid(format!("{} projection points for {n} rows", p.pc1.len())));
        }
    }
    let f64p = |p: &Point3<T>| p.map(|v| v.to_f64_lossless());
    let (mut sum_e, mut strict, mut relax, mut outliers, mut count) = (0.0, 0usize, 0usize, 0usize, 0usize);
    let (mut sum_e2, mut acc2) = (0.0, 0usize);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, t) = (f64p(&pred[i]), f64p(&gt[i]));
        let e = norm3(&sub3(&p, &t));
        let r = e / norm3(&t).max(REL_GUARD);
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("prediction row {i}")));
        }
        sum_e += e;
        strict += usize::from(e < STRICT_ABS || r < STRICT_REL);
        relax += usize::from(e < RELAX_ABS || r < RELAX_REL);
        outliers += usize::from(e > OUTLIER_ABS || r > OUTLIER_REL);
        count += 1;
        if let Some(proj) = &projection {
            let x = f64p(&proj.pc1[i]);
            let u0 = proj.camera.project(x)?;
            let up = proj.camera.project(add3(&x, &p))?;
            let ut = proj.camera.project(add3(&x, &t))?;
            let e2 = ((up[0] - ut[0]).powi(2) + (up[1] - ut[1]).powi(2)).sqrt();
            let g2 = ((ut[0] - u0[0]).powi(2) + (ut[1] - u0[1]).powi(2)).sqrt();
            let r2 = e2 / g2.max(REL_GUARD);
            sum_e2 += e2;
            acc2 += usize::from(e2 < ACC2D_PX || r2 < ACC2D_REL);
        }
    }
    if count == 0 {
        return Err(Error::invalid("no valid points to evaluate"));
    }
    let c = count as f64;
    Ok(MetricReport {
        epe3d: sum_e / c,
        acc3d_strict: strict as f64 / c,
        acc3d_relax: relax as f64 / c,
        outliers3d: outliers as f64 / c,
        epe2d: projection.as_ref().map(|_| sum_e2 / c),
        acc2d: projection.as_ref().map(|_| acc2 as f64 / c),
        n_evaluated: count,
    })
}

/// Seed of the fixed point order used when evaluating a network, so that
/// results do not depend on the order points were stored in.
pub const EVAL_ORDER_SEED: u64 = 0x5eed_e7a1;

/// Finest-level predictions of `net` on every pair, pooled into one report.
/// Each pair is first drawn to the network's input size in a fixed random
/// order; ground truth and masks follow by index.
pub fn evaluate_network<T: Real>(
    net: &Network,
    ps: &ParamStore<T>,
    pairs: &[ScenePair<T>],
    use_mask: bool,
    camera: Option<Pinhole>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let (mut pred, mut gt, mut mask, mut pc1) = (vec![], vec![], vec![], vec![]);
    for (k, pair) in pairs.iter().enumerate() {
        let p = pair.resample(net.cfg.n_input, EVAL_ORDER_SEED.wrapping_add(k as u64))?;
        let inf = net.infer(ps, &p.pc1, &p.pc2, None)?;
        for (f, &i) in inf.flow.iter().zip(&inf.source_idx) {
            pred.push(*f);
            gt.push(p.gt_flow[i]);
            mask.push(p.mask[i]);
            pc1.push(p.pc1.coords[i]);
        }
    }
    evaluate(
        &pred,
        &gt,
        use_mask.then_some(&mask[..]),
        camera.map(|camera| Projection { camera, pc1: &pc1 }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![[0.1, 0.0, 0.2], [0.0, 0.0, 0.0], [-0.3, 0.1, 0.0]];
        let r = evaluate(&gt, &gt, None, None).unwrap();
        assert_eq!((r.epe3d, r.acc3d_strict, r.acc3d_relax, r.outliers3d), (0.0, 1.0, 1.0, 0.0));
        assert_eq!(r.epe2d, None);
        assert_eq!(r.n_evaluated, 3);
    }

    #[test]
    fn twenty_percent_error_is_an_outlier() {
        let gt = vec![[1.0, 0.0, 0.0]];
        let pred = vec![[1.2, 0.0, 0.0]];
        let r = evaluate(&pred, &gt, None, None).unwrap();
        assert!((r.epe3d - 0.2).abs() < 1e-15);
        assert_eq!(r.acc3d_strict, 0.0);
        assert_eq!(r.acc3d_relax, 0.0);
        assert_eq!(r.outliers3d, 1.0);
    }

    #[test]
    fn relative_branch_counts() {
        // 0.2 m error on a 5 m motion: relative 4%
        let r = evaluate(&[[5.2, 0.0, 0.0]], &[[5.0, 0.0, 0.0]], None, None).unwrap();
        assert_eq!((r.acc3d_strict, r.acc3d_relax, r.outliers3d), (1.0, 1.0, 0.0));
        // static point: the guard keeps the ratio finite and huge
        let r = evaluate(&[[0.01, 0.0, 0.0]], &[[0.0; 3]], None, None).unwrap();
        assert_eq!((r.acc3d_strict, r.outliers3d), (1.0, 1.0));
    }

    #[test]
    fn masked_half_matches_valid_half() {
        let gt = vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.3, 0.3, 0.0], [0.0, 0.0, 0.4]];
        let pred = vec![[0.12, 0.0, 0.0], [0.5, 0.2, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 0.41]];
        let mask = [true, false, true, false];
        let a = evaluate(&pred, &gt, Some(&mask), None).unwrap();
        let b = evaluate(&[pred[0], pred[2]], &[gt[0], gt[2]], None, None).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&pred, &gt, Some(&[false; 4]), None).is_err());
        assert!(evaluate(&pred[..3], &gt, None, None).is_err());
    }

    #[test]
    fn image_plane_metrics() {
        let cam = Pinhole::default();
        let pc1 = vec![[0.0, 0.0, 2.0], [0.5, -0.2, 3.0]];
        let gt = vec![[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]];
        let r = evaluate(&gt, &gt, None, Some(Projection { camera: cam, pc1: &pc1 })).unwrap();
        assert_eq!(r.epe2d, Some(0.0));
        assert_eq!(r.acc2d, Some(1.0));
        // lateral 0.01 m error at depth 2: 1050 * 0.01 / 2 = 5.25 px
        let pred = vec![[0.11, 0.0, 0.0], [0.0, 0.1, 0.0]];
        let r = evaluate(&pred, &gt, None, Some(Projection { camera: cam, pc1: &pc1 })).unwrap();
        assert!((r.epe2d.unwrap() - 5.25 / 2.0).abs() < 1e-9);
        assert_eq!(r.acc2d, Some(0.5));
        assert!(cam.project([0.0, 0.0, 0.0]).is_err());
        assert_eq!(cam.project([0.0, 0.0, 1.0]).unwrap(), [479.5, 269.5]);
    }

    #[test]
    fn csv_fields_leave_2d_blank() {
        let r = evaluate(&[[0.0; 3]], &[[0.0; 3]], None, None).unwrap();
        assert!(r.csv_fields().ends_with(",,"));
    }

    fn rows(seed: u64, n: usize) -> (Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<bool>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |s: f64| -> Point3<f64> { [rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s)] };
        let gt: Vec<_> = (0..n).map(|_| v(0.5)).collect();
        let pred: Vec<_> = gt.iter().enumerate().map(|(i, g)| add3(g, &[0.05 * (i % 7) as f64, 0.0, 0.01])).collect();
        let mask = (0..n).map(|i| i % 5 != 2).collect();
        (pred, gt, mask)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn report_invariants(seed in 0u64..100_000, n in 1usize..300) {
            let (pred, gt, mask) = rows(seed, n);
            let r = evaluate(&pred, &gt, None, None).unwrap();
            prop_assert!(r.acc3d_strict <= r.acc3d_relax);
            prop_assert!(r.epe3d >= 0.0);
            for v in [r.acc3d_strict, r.acc3d_relax, r.outliers3d] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let inliers = pred.iter().zip(&gt).filter(|(p, t)| {
                let e = norm3(&sub3(*p, *t));
                e <= OUTLIER_ABS && e / norm3(*t).max(REL_GUARD) <= OUTLIER_REL
            }).count() as f64 / n as f64;
            prop_assert_eq!(r.outliers3d + inliers, 1.0);

            let all = vec![true; n];
            prop_assert_eq!(evaluate(&pred, &gt, Some(&all), None).unwrap(), r);

            // reversing all three consistently changes nothing but summation order
            let m = evaluate(&pred, &gt, Some(&mask), None);
            let rev = |v: &[Point3<f64>]| v.iter().rev().copied().collect::<Vec<_>>();
            let mrev: Vec<bool> = mask.iter().rev().copied().collect();
            let mr = evaluate(&rev(&pred), &rev(&gt), Some(&mrev), None);
            match (m, mr) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.epe3d - b.epe3d).abs() <= 1e-12);
                    prop_assert_eq!((a.acc3d_strict, a.acc3d_relax, a.outliers3d), (b.acc3d_strict, b.acc3d_relax, b.outliers3d));
                }
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }

    #[test]
    fn outlier_complement_is_exact_for_all_small_counts() {
        for n in 1..=4096usize {
            for k in 0..=n {
                assert_eq!(k as f64 / n as f64 + (n - k) as f64 / n as f64, 1.0, "{k}/{n}");
            }
        }
    }
}
