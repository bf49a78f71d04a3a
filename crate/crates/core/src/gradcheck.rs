//! Central finite-difference verification of backward rules.

use crate::autograd::{Graph, OpKind, Var};
use crate::error::Result;
use crate::params::{Bound, Params};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest relative error between backward() and central differences of
/// a scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.constant(p);
        let l = f(&mut g, x)?;
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Worst relative error observed over one named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

/// Checks every coordinate of every parameter block of a model loss.
///
/// `corrupt` optionally breaks one backward rule on the analytic side.
pub fn check_params<F>(params: &Params, eps: f64, corrupt: Option<OpKind>, loss: F) -> Result<Vec<BlockError>>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(kind) = corrupt {
        g.corrupt_backward(kind);
    }
    let bound = params.bind(&mut g);
    let l = loss(&mut g, &bound)?;
    g.backward(l)?;
    let grads = bound.grads(&g);

    let eval = |p: &Params| -> Result<f64> {
        let mut g = Graph::inference();
        let bound = p.bind(&mut g);
        let l = loss(&mut g, &bound)?;
        g.value(l).item()
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let mut worst = 0.0f64;
        let n = params.get(id).len();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grads[id.index()].data()[i], numeric));
        }
        out.push(BlockError {
            name: params.name(id).to_string(),
            coordinates: n,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = finite_difference_check(|g, _x| Ok(g.constant(Tensor::scalar(3.0))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let bb = b.clone();
        let err_a = finite_difference_check(
            move |g, x| {
                let b = g.constant(bb.clone());
                let p = g.matmul(x, b)?;
                let t = g.tanh(p);
                Ok(g.sum(t))
            },
            &a,
            1e-6,
        )
        .unwrap();
        let err_b = finite_difference_check(
            move |g, x| {
                let a = g.constant(a.clone());
                let p = g.matmul(a, x)?;
                let t = g.tanh(p);
                Ok(g.sum(t))
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn sigmoid_chain() {
        let mut r = rng();
        let w = Tensor::uniform(&[1, 5], 1.0, &mut r);
        let x = Tensor::uniform(&[5, 1], 1.0, &mut r);
        let err = finite_difference_check(
            move |g, w| {
                let x = g.constant(x.clone());
                let z = g.matmul(w, x)?;
                let s = g.sigmoid(z);
                Ok(g.sum(s))
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_and_pooling_gradients() {
        let mut r = rng();
        let seq = Tensor::uniform(&[1, 8, 4], 1.0, &mut r);
        let filt = Tensor::uniform(&[2, 3, 4], 1.0, &mut r);
        let bias = Tensor::uniform(&[2], 0.5, &mut r);
        let (f2, b2) = (filt.clone(), bias.clone());
        let err_seq = finite_difference_check(
            move |g, x| {
                let f = g.constant(f2.clone());
                let b = g.constant(b2.clone());
                let c = g.conv1d_valid(x, f, b)?;
                let t = g.tanh(c);
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            },
            &seq,
            1e-6,
        )
        .unwrap();
        let (s2, b3) = (seq.clone(), bias.clone());
        let err_filt = finite_difference_check(
            move |g, f| {
                let x = g.constant(s2.clone());
                let b = g.constant(b3.clone());
                let c = g.conv1d_valid(x, f, b)?;
                let m = g.max_over_time(c)?;
                let s = g.sigmoid(m);
                Ok(g.sum(s))
            },
            &filt,
            1e-6,
        )
        .unwrap();
        let err_bias = finite_difference_check(
            move |g, b| {
                let x = g.constant(seq.clone());
                let f = g.constant(filt.clone());
                let c = g.conv1d_valid(x, f, b)?;
                let s = g.sigmoid(c);
                Ok(g.sum(s))
            },
            &bias,
            1e-6,
        )
        .unwrap();
        assert!(err_seq < 1e-6, "{err_seq}");
        assert!(err_filt < 1e-6, "{err_filt}");
        assert!(err_bias < 1e-6, "{err_bias}");
    }

    #[test]
    fn softmax_family_and_reshaping_ops() {
        let mut r = rng();
        let x = Tensor::uniform(&[3, 5], 2.0, &mut r);
        let weights = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let err = finite_difference_check(
            move |g, x| {
                let w = g.constant(weights.clone());
                let s = g.softmax(x);
                let ls = g.log_softmax(x);
                let a = g.mul(s, w)?;
                let a2 = g.slice_last(a, 1, 3)?;
                let b = g.slice_last(ls, 0, 2)?;
                let cat = g.concat(&[a2, b])?;
                let r = g.reshape(cat, vec![15])?;
                let m = g.mean(r);
                let nll = g.pick_nll(ls, &[0, 4, 2], &[1.0, 0.0, 0.5])?;
                let sc = g.scale(nll, 0.3);
                let tot = g.add(m, sc)?;
                Ok(tot)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_bias_sub_relu() {
        let mut r = rng();
        let table = Tensor::uniform(&[5, 3], 1.0, &mut r);
        let bias = Tensor::uniform(&[3], 1.0, &mut r);
        let err = finite_difference_check(
            move |g, t| {
                let rows = g.gather_rows(t, &[4, 1, 4, 0])?;
                let b = g.constant(bias.clone());
                let y = g.add_bias(rows, b)?;
                let sq = g.mul(y, y)?;
                let d = g.sub(sq, y)?;
                let th = g.tanh(d);
                Ok(g.sum(th))
            },
            &table,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fused_losses() {
        let mut r = rng();
        let logits = Tensor::uniform(&[2, 4], 2.0, &mut r);
        let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let err = finite_difference_check(|g, x| g.modified_sce(x, &labels, [0.5, 0.2, 0.3]), &logits, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_difference_check(|g, x| g.bce_with_logits(x, &labels), &logits, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let mut r = rng();
        let mut params = Params::new();
        params.add("w", Tensor::uniform(&[2, 3], 1.0, &mut r));
        let x = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let loss = |g: &mut Graph, b: &Bound| {
            let ids: Vec<_> = params.ids().collect();
            let xc = g.constant(x.clone());
            let p = g.matmul(b[ids[0]], xc)?;
            let s = g.sigmoid(p);
            Ok(g.sum(s))
        };
        let ok = check_params(&params, 1e-6, None, loss).unwrap();
        assert!(ok[0].max_rel_err < 1e-6);
        let bad = check_params(&params, 1e-6, Some(OpKind::Sigmoid), loss).unwrap();
        assert!(bad[0].max_rel_err > 1e-3);
    }
}
