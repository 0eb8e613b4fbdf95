//! Reverse-mode automatic differentiation and a finite-difference checker.

mod graph;
mod tensor;

pub use graph::{Graph, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::optim::ParamStore;
use crate::scalar::Real;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of
    /// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps stencil crossed a kink or tie (the branch
    /// signature changed), where a central difference is meaningless.
    pub skipped: usize,
    /// Where the worst error occurred.
    pub worst: Option<String>,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            worst: None,
        }
    }

    fn record(&mut self, analytic: f64, central: f64, at: impl FnOnce() -> String) {
        let rel = relative_error(analytic, central);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.worst = Some(format!("{} (analytic {analytic:e}, central {central:e})", at()));
            self.max_rel_err = rel;
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.worst = other.worst.clone();
        }
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn relative_error(analytic: f64, central: f64) -> f64 {
    let den = analytic.abs().max(central.abs()).max(1e-8);
    (analytic - central).abs() / den
}

/// Scalar test functional `mean(R ⊙ x)` with seeded `R ~ U(-1, 1)`.
pub fn random_probe<T: Real>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<T> = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0) / n as f64)).collect();
    g.weighted_sum(x, &w)
}

fn eval<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = f(&mut g, v)?;
    Ok((g.value(loss)[0].to_f64_lossless(), g.branch_signature()))
}

/// Compares the backpropagated gradient of `f` at `x` with central
/// differences, coordinate by coordinate.
pub fn grad_check<T: Real, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let loss = f(&mut g, v)?;
    let base_sig = g.branch_signature();
    g.backprop(loss)?;
    let analytic: Vec<f64> = g.grad(v).unwrap().iter().map(|a| a.to_f64_lossless()).collect();

    let mut report = GradCheckReport::empty();
    let e = T::lit(eps);
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += e;
        let mut xm = x.clone();
        xm.data_mut()[i] -= e;
        let (fp, sp) = eval(&f, &xp)?;
        let (fm, sm) = eval(&f, &xm)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let h = (xp.data()[i] - xm.data()[i]).to_f64_lossless();
        let cd = (fp - fm) / h;
        report.record(analytic[i], cd, || format!("input[{i}]"));
    }
    Ok(report)
}

/// Checks parameter gradients of `f`. At most `per_param` coordinates of
/// each parameter are sampled (seeded); smaller parameters are checked in
/// full. Parameter values are restored afterwards.
pub fn grad_check_params<T: Real, F>(
    store: &mut ParamStore<T>,
    f: F,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let base_sig = g.branch_signature();
    g.backprop(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = g
        .params()
        .map(|(name, v)| {
            (
                name.to_string(),
                g.grad(v).unwrap().iter().map(|a| a.to_f64_lossless()).collect(),
            )
        })
        .collect();
    drop(g);

    let eval_store = |store: &ParamStore<T>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok((g.value(loss)[0].to_f64_lossless(), g.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::empty();
    let e = T::lit(eps);
    for (name, grad) in &analytic {
        let n = grad.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.value(name)?.data()[i];
            store.value_mut(name)?.data_mut()[i] = orig + e;
            let plus = eval_store(store);
            store.value_mut(name)?.data_mut()[i] = orig - e;
            let minus = eval_store(store);
            store.value_mut(name)?.data_mut()[i] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let h = ((orig + e) - (orig - e)).to_f64_lossless();
            let cd = (fp - fm) / h;
            report.record(grad[i], cd, || format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
