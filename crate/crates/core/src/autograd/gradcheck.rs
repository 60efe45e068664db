use alloc::vec::Vec;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; keeps exactly-zero gradients
/// from turning central-difference roundoff into a spurious failure.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), core::slice::from_ref(point), h)
}

/// Like [`grad_check`] but differentiates with respect to every tensor in `points`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor], grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(points, true)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|s| s.to_vec());
        for i in 0..points[k].len() {
            let orig = points[k].data()[i];
            pts[k].data_mut()[i] = orig + h;
            let (gp, _, op) = eval(&pts, false)?;
            pts[k].data_mut()[i] = orig - h;
            let (gm, _, om) = eval(&pts, false)?;
            pts[k].data_mut()[i] = orig;
            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares_at_known_point() {
        let x = Tensor::from_vec(alloc::vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0]);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::from_vec(alloc::vec![1.0, 2.0]);
        let r = grad_check(|g, v| Ok(g.scale(v, 2.0)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_of_softmax() {
        let mut rng = Rng::new(11);
        let x = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let labels = [0usize, 3, 4, 1];
        let err = grad_check(
            |g, v| {
                let p = g.softmax(v);
                let lp = g.log(p);
                let picked = g.gather(lp, &labels)?;
                let m = g.mean(picked);
                Ok(g.scale(m, -1.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
