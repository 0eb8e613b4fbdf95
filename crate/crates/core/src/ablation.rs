//! The ablation matrix: named configuration variants trained and evaluated
//! under identical seeds and data.

use std::path::Path;
use std::time::Instant;

use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::layers::{CandidateMode, SimilarityMode};
use crate::metrics::{evaluate_network, MetricReport, Pinhole};
use crate::network::{Network, NetworkConfig, PredictorKind, RefinementDesign};
use crate::training::{train, LossConfig, TrainConfig, TrainOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cfg: NetworkConfig,
}

fn variant(name: &str, cfg: NetworkConfig) -> Variant {
    Variant {
        name: name.to_string(),
        cfg,
    }
}

/// The thirteen variants, derived from `base` (which should be the full
/// model). The nearest-neighbour variant uses `k_setconv` candidates.
pub fn ablation_variants(base: &NetworkConfig) -> Result<Vec<Variant>> {
    let mut v = vec![];
    let with = |f: &dyn Fn(&mut NetworkConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    v.push(variant("w/o backward validation", with(&|c| c.embedding.backward_validation = false)));
    v.push(variant(
        "w/o backward validation and all-to-all mechanism",
        with(&|c| {
            c.embedding.backward_validation = false;
            c.embedding.candidates = CandidateMode::Knn(c.k_setconv);
        }),
    ));
    for (name, mode) in [
        ("product similarity", SimilarityMode::Product),
        ("cosine product similarity", SimilarityMode::Cosine),
        ("normalized product similarity", SimilarityMode::NormalizedProduct),
    ] {
        v.push(variant(name, with(&|c| c.embedding.similarity = mode)));
    }
    v.push(variant(
        "replace Scene Flow Predictor with GRU",
        with(&|c| c.predictor_kind = PredictorKind::Gru),
    ));
    for input in ["de", "p", "f_dense", "f_enc"] {
        let mut c = base.clone();
        c.predictor_inputs = c.predictor_inputs.without(input)?;
        v.push(variant(&format!("w/o {input}"), c));
    }
    for design in [
        RefinementDesign::FourLayerFull,
        RefinementDesign::Interp2048,
        RefinementDesign::Interp8192,
    ] {
        v.push(variant(&design.to_string(), with(&|c| c.refinement_design = design)));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// The failure message when the variant did not build, train or evaluate.
    pub outcome: std::result::Result<MetricReport, String>,
    pub train_seconds: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,epe3d,acc3d_strict,acc3d_relax,outliers3d,epe2d,acc2d,train_seconds";

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationRow {
    /// Failed rows carry `failed` in the metric columns.
    pub fn csv_row(&self) -> String {
        let metrics = match &self.outcome {
            Ok(r) => r.csv_fields(),
            Err(_) => "failed,failed,failed,failed,,".to_string(),
        };
        format!("{},{metrics},{:.3}", csv_quote(&self.name), self.train_seconds)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::write(path, ablation_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub train_data: &'a [ScenePair<f64>],
    /// Evaluated after training; the training set when `None`.
    pub eval_data: Option<&'a [ScenePair<f64>]>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub camera: Option<Pinhole>,
}

fn run_one(v: &Variant, setup: &AblationSetup<'_>) -> std::result::Result<MetricReport, String> {
    let (net, mut ps) = Network::build::<f64>(&v.cfg).map_err(|e| e.to_string())?;
    train(&net, &mut ps, setup.train_data, &setup.train, &setup.loss, &TrainOutput::default(), &mut |_| {})
        .map_err(|e| e.to_string())?;
    let eval = setup.eval_data.unwrap_or(setup.train_data);
    evaluate_network(&net, &ps, eval, setup.loss.mask_mode == crate::training::MaskMode::ExcludeInvalid, setup.camera)
        .map_err(|e| e.to_string())
}

/// Trains and evaluates every variant in order; a failing variant yields a
/// failed row and the run continues. `on_row` sees each row as it finishes.
pub fn run_ablation(
    variants: &[Variant],
    setup: &AblationSetup<'_>,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Vec<AblationRow> {
    variants
        .iter()
        .map(|v| {
            let t0 = Instant::now();
            let outcome = run_one(v, setup);
            let row = AblationRow {
                name: v.name.clone(),
                outcome,
                train_seconds: t0.elapsed().as_secs_f64(),
            };
            on_row(&row);
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneGenConfig};

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

    fn data() -> Vec<ScenePair<f64>> {
        (0..2)
            .map(|s| generate(&SceneGenConfig { n_points: 64, seed: s, ..Default::default() }).unwrap())
            .collect()
    }

    fn setup(d: &[ScenePair<f64>]) -> AblationSetup<'_> {
        AblationSetup {
            train_data: d,
            eval_data: None,
            train: TrainConfig { epochs: 2, ..Default::default() },
            loss: LossConfig::default(),
            camera: Some(Pinhole::default()),
        }
    }

    #[test]
    fn thirteen_distinct_valid_variants() {
        let v = ablation_variants(&tiny()).unwrap();
        assert_eq!(v.len(), 13);
        for (i, a) in v.iter().enumerate() {
            a.cfg.validate().unwrap();
            for b in &v[i + 1..] {
                assert_ne!(a.name, b.name);
            }
        }
        assert_eq!(v[10].cfg, tiny());
    }

    #[test]
    fn single_base_row_matches_standalone_run() {
        let d = data();
        let s = setup(&d);
        let rows = run_ablation(&[variant("base", tiny())], &s, &mut |_| {});
        assert_eq!(rows.len(), 1);
        let (net, mut ps) = Network::build::<f64>(&tiny()).unwrap();
        train(&net, &mut ps, &d, &s.train, &s.loss, &TrainOutput::default(), &mut |_| {}).unwrap();
        let direct = evaluate_network(&net, &ps, &d, true, s.camera).unwrap();
        assert_eq!(rows[0].outcome, Ok(direct));
    }

    #[test]
    fn repeated_variant_gives_identical_rows_and_failures_continue() {
        let d = data();
        let mut broken = tiny();
        broken.k_setconv = 99;
        let vs = [variant("a", tiny()), variant("bad", broken), variant("b", tiny())];
        let rows = run_ablation(&vs, &setup(&d), &mut |_| {});
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].outcome, rows[2].outcome);
        assert!(rows[1].outcome.is_err());
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ABLATION_CSV_HEADER);
        assert!(lines[2].starts_with("bad,failed,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
    }

    #[test]
    fn quoting() {
        assert_eq!(csv_quote("w/o de"), "w/o de");
        assert_eq!(csv_quote("a,b"), "\"a,b\"");
    }
}
