use rand::Rng as _;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::par::{self, ExecMode};
use crate::rng::{rng_from_seed, Rng};
use crate::{Error, Result};

/// Below this magnitude derivatives are compared in absolute terms.
/// Central differences at `eps = 1e-5` carry roughly 1e-11 of rounding
/// noise, so a structurally zero gradient would otherwise fail.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Rounding slack, in ulps of the function value, allowed in each central
/// difference before a mismatch counts.
pub const FD_NOISE_ULPS: f64 = 64.0;

/// Relative error between an analytic and a finite-difference derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Absolute rounding noise of a central difference of a function whose value
/// is near `value`. A loss of magnitude 10 at `eps = 1e-5` gives about 7e-9.
pub fn fd_noise(value: f64, eps: f64) -> f64 {
    FD_NOISE_ULPS * f64::EPSILON * value.abs().max(1.0) / (2.0 * eps)
}

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let y = f(&mut g, &vars)?;
    let v = g.value(y);
    if !v.is_scalar_like() {
        return Err(Error::shape("grad_check", format!("function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Central-difference check of `f` with respect to every coordinate of every
/// input. Returns the maximum relative error; derivatives that differ by less
/// than [`fd_noise`] count as equal.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, mode: ExecMode) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let y = f(&mut g, &vars)?;
    let value = g.value(y);
    if !value.is_scalar_like() {
        return Err(Error::shape("grad_check", format!("function must be scalar, got {:?}", value.shape())));
    }
    let noise = fd_noise(value.item(), eps);
    let grads = g.backward(y)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let errors = par::try_map(mode, &coords, |&(i, j)| {
        let shifted = |delta: f64| -> Result<f64> {
            let mut pts = points.to_vec();
            let mut data = pts[i].to_vec();
            data[j] += delta;
            pts[i] = Tensor::new(pts[i].shape().to_vec(), data)?;
            eval_scalar(&f, &pts)
        };
        let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let err = if (a - numeric).abs() <= noise { 0.0 } else { relative_error(a, numeric) };
        Ok::<f64, Error>(err)
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(point), eps, ExecMode::Parallel)
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl PrimitiveCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches")
}

/// `sum(w * y)` with fixed random weights, so every output coordinate
/// contributes a generic, non-vanishing gradient.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    let m = g.mean(p);
    Ok(g.scale(m, w.numel() as f64))
}

type Probe = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send>;

/// Finite-difference check of every primitive at random points.
pub fn check_primitives(seed: u64, mode: ExecMode) -> Result<Vec<PrimitiveCheck>> {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = rng_from_seed(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Probe, f64)> = Vec::new();

    macro_rules! case {
        ($name:expr, $inputs:expr, $out_shape:expr, $tol:expr, |$g:ident, $v:ident| $body:expr) => {{
            let w = random(&mut rng, &$out_shape, 1.0);
            let probe: Probe = Box::new(move |$g: &mut Graph, $v: &[Var]| {
                let y = $body?;
                weighted_sum($g, y, &w)
            });
            cases.push(($name, $inputs, probe, $tol));
        }};
    }

    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 5], 1.0);
    case!("matmul", vec![a.clone(), b], [3, 5], TOL, |g, v| g.matmul(v[0], v[1]));
    let c = random(&mut rng, &[3, 4], 1.0);
    case!("add", vec![a.clone(), c.clone()], [3, 4], TOL, |g, v| g.add(v[0], v[1]));
    let row = random(&mut rng, &[4], 1.0);
    case!("add_row_broadcast", vec![a.clone(), row.clone()], [3, 4], TOL, |g, v| g.add(v[0], v[1]));
    case!("mul", vec![a.clone(), c.clone()], [3, 4], TOL, |g, v| g.mul(v[0], v[1]));
    case!("mul_row_broadcast", vec![a.clone(), row], [3, 4], TOL, |g, v| g.mul(v[0], v[1]));
    case!("scale", vec![a.clone()], [3, 4], TOL, |g, v| Ok::<Var, Error>(g.scale(v[0], -1.7)));
    case!("transpose", vec![a.clone()], [4, 3], TOL, |g, v| g.transpose(v[0]));
    let d = random(&mut rng, &[2, 4], 1.0);
    case!("concat_rows", vec![a.clone(), d], [5, 4], TOL, |g, v| g.concat(&[v[0], v[1]], 0));
    let e = random(&mut rng, &[3, 2], 1.0);
    case!("concat_cols", vec![a.clone(), e], [3, 6], TOL, |g, v| g.concat(&[v[0], v[1]], 1));
    case!("slice_rows", vec![a.clone()], [2, 4], TOL, |g, v| g.slice(v[0], 0, 1, 3));
    case!("slice_cols", vec![a.clone()], [3, 2], TOL, |g, v| g.slice(v[0], 1, 2, 4));
    let s = random(&mut rng, &[3, 5], 2.0);
    case!("softmax", vec![s], [3, 5], TOL, |g, v| g.softmax(v[0]));
    let big = random(&mut rng, &[2, 4], 30.0);
    case!("softmax_large_logits", vec![big], [2, 4], 1e-3, |g, v| g.softmax(v[0]));
    let ln = random(&mut rng, &[3, 6], 2.0);
    case!("layer_norm", vec![ln], [3, 6], TOL, |g, v| g.layer_norm(v[0]));
    let ge = random(&mut rng, &[3, 4], 3.0);
    case!("gelu", vec![ge], [3, 4], TOL, |g, v| Ok::<Var, Error>(g.gelu(v[0])));
    let cx = random(&mut rng, &[3, 2, 5], 1.0);
    let cw1 = random(&mut rng, &[2, 3, 1], 1.0);
    let cb = random(&mut rng, &[2], 1.0);
    case!("conv1d", vec![cx.clone(), cw1, cb.clone()], [2, 10], TOL, |g, v| g.conv1d(v[0], v[1], v[2]));
    let cw3 = random(&mut rng, &[2, 3, 3], 1.0);
    case!("conv1d_width3", vec![cx, cw3, cb], [2, 10], TOL, |g, v| g.conv1d(v[0], v[1], v[2]));
    case!("l2_normalize", vec![a.clone()], [3, 4], TOL, |g, v| g.l2_normalize(v[0]));
    let q = random(&mut rng, &[4, 4], 1.0);
    case!("cosine_similarity_matrix", vec![a.clone(), q], [3, 4], TOL, |g, v| g
        .cosine_similarity_matrix(v[0], v[1]));
    let logits = random(&mut rng, &[4, 3], 2.0);
    case!("cross_entropy", vec![logits], [0usize; 0], TOL, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
    case!("mean", vec![a], [0usize; 0], TOL, |g, v| Ok::<Var, Error>(g.mean(v[0])));

    cases
        .into_iter()
        .map(|(name, inputs, probe, tol)| {
            let err = grad_check_many(probe, &inputs, EPS, mode)?;
            Ok(PrimitiveCheck {
                name,
                max_rel_error: err,
                tolerance: tol,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 1], vec![1.5, -0.5, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let y = g.matmul(v, wv)?;
                Ok(g.mean(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..3 {
            for c in check_primitives(seed, ExecMode::Parallel).unwrap() {
                assert!(c.passed(), "{} failed: {}", c.name, c.max_rel_error);
            }
        }
    }

    #[test]
    fn l2_normalize_gradient_is_orthogonal_to_input() {
        // f(x) = sum(normalize(x)) is scale invariant, so x . grad f = 0
        let x = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let y = g.l2_normalize(v).unwrap();
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        let dot: f64 = grads.get(v).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-14);
        let err = grad_check(
            |g, v| {
                let y = g.l2_normalize(v)?;
                Ok(g.mean(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
        assert!((relative_error(0.0, 4e-12) - 4e-6).abs() < 1e-18);
        // eight ulps of a loss near 7 at eps = 1e-5, the worst seen on a zero gradient
        assert!(fd_noise(7.0, 1e-5) > 8.0 * 8.9e-16 / 2e-5);
        assert!(fd_noise(7.0, 1e-5) < 1e-8);
    }
}
