//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference, in `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Coordinates sampled per input tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Added to every analytic derivative before comparison. Test hook for
    /// negative controls; keep at 0.
    pub analytic_offset: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            coords_per_tensor: None,
            seed: 0,
            analytic_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences. `f` is called on a fresh graph with one leaf per input.
/// Error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(inputs: &[Tensor], opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.eps
        )));
    }
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item()?;
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            grads = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = t.data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let (up, _) = eval(&work, false)?;
            work[ti].data_mut()[c] = orig - opts.eps;
            let (down, _) = eval(&work, false)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g[c]) + opts.analytic_offset;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at input {ti}, coordinate {c}"
                )));
            }
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, c));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::NormState;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let r = grad_check(&[Tensor::scalar(3.0)], &GradCheckOptions::default(), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&[Tensor::scalar(1.0)], &opts, |g, v| Ok(g.sum(v[0]))).is_err());
    }

    #[test]
    fn offset_hook_is_detected() {
        let opts = GradCheckOptions {
            analytic_offset: 1e-3,
            ..Default::default()
        };
        let r = grad_check(&[Tensor::scalar(2.0)], &opts, |g, v| Ok(g.sum(v[0]))).unwrap();
        assert!(r.max_rel_error > 1e-5);
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inputs = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4, 5]),
            random(&mut rng, &[5]),
            random(&mut rng, &[5]),
            random(&mut rng, &[5]),
        ];
        let r = grad_check(&inputs, &GradCheckOptions::default(), |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.gelu(h);
            let mut st = NormState::new(5);
            let bn = g.batchnorm(h, v[3], v[4], &mut st, true)?;
            let ln = g.layernorm(h, v[3], v[4], 1e-5)?;
            let both = g.concat_cols(&[bn, ln])?;
            let sm = g.softmax(both)?;
            let t = g.transpose(sm)?;
            let sl = g.slice(t, 1, 6, 0, 2)?;
            let gr = g.gather_rows(sl, &[0, 3, 3, 5])?;
            let gc = g.gather_cols(h, &[4, 0, 0])?;
            let rs = g.reshape(gc, &[9])?;
            let rs = g.reshape(rs, &[3, 3])?;
            let sp = g.softplus(rs);
            let sc = g.scale(sp, -0.7);
            let padded = g_pad(g, sc)?;
            let cat = g.concat_rows(&[gr, padded])?;
            let sq = g.mul(cat, cat)?;
            let d = g.sub(sq, cat)?;
            Ok(g.mean(d))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    fn g_pad(g: &mut Graph, x: Var) -> Result<Var> {
        // [3,3] -> [3,2] so it stacks under a [4,2] block
        g.slice(x, 0, 3, 1, 2)
    }

    #[test]
    fn batched_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 2])];
        let r = grad_check(&inputs, &GradCheckOptions::default(), |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let q = g.mul(p, p)?;
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn grid_and_im2col_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = vec![
            random(&mut rng, &[2, 3]),
            random(&mut rng, &[3, 2]),
            random(&mut rng, &[45, 4]),
        ];
        let r = grad_check(&inputs, &GradCheckOptions::default(), |g, v| {
            let f = g.grid(v[0], v[1], 3, 4)?;
            let p = g.im2col(f, 1, 3, 4, 3, 2, 1)?;
            let y = g.matmul(p, v[2])?;
            let y = g.gelu(y);
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn eval_batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = vec![
            random(&mut rng, &[3, 2]),
            random(&mut rng, &[2]),
            random(&mut rng, &[2]),
        ];
        let mut st = NormState::new(2);
        st.running_mean = vec![0.2, -0.1];
        st.running_var = vec![0.7, 1.9];
        let r = grad_check(&inputs, &GradCheckOptions::default(), |g, v| {
            let y = g.batchnorm(v[0], v[1], v[2], &mut st, false)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}
