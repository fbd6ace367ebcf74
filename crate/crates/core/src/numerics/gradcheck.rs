use super::graph::{Gradients, Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Evaluates a finished graph: the loss value, plus gradients when asked.
pub fn evaluate(graph: &Graph<'_>, loss: NodeId, want_grad: bool) -> Result<(f64, Option<Gradients>)> {
    let v = graph.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    let grads = if want_grad { Some(graph.backward(loss)?) } else { None };
    Ok((v, grads))
}

/// Largest relative disagreement between reverse-mode gradients of the
/// parameters in `store` and five-point central differences with the given
/// step (truncation error O(step⁴)).
///
/// `loss_fn(store, want_grad)` must be deterministic. Parameters absent from
/// the returned gradients count as having zero gradient.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    if store.num_scalars() == 0 {
        return Ok(0.0);
    }
    let (_, grads) = loss_fn(store, true)?;
    let grads = grads.ok_or_else(|| Error::InvalidArgument("loss_fn returned no gradients".into()))?;
    let ns = store.namespace().to_string();
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads.get(&ns, id).map(|t| t.data().to_vec());
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            let mut at = |x: f64| {
                store.value_mut(id).data_mut()[j] = x;
                loss_fn(store, false).map(|r| r.0)
            };
            let (p1, m1) = (at(orig + step), at(orig - step));
            let (p2, m2) = (at(orig + 2.0 * step), at(orig - 2.0 * step));
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max((a - fd).abs() / (fd.abs() + 1e-12));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_nearly_exact() {
        let mut s = ParamStore::new("q");
        s.register("x", Tensor::row(&[0.3, -1.2, 2.0])).unwrap();
        let err = grad_check(&mut s, 1e-5, |s, want| {
            let mut g = Graph::new();
            let x = g.param(s, s.ids().next().unwrap());
            let c = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
            let d = g.sub(x, c);
            let sq = g.square(d);
            let l = g.sum(sq);
            evaluate(&g, l, want)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn empty_store_is_zero() {
        let mut s = ParamStore::new("e");
        let err = grad_check(&mut s, 1e-5, |_, _| Ok((1.0, None))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = ParamStore::new("n");
        s.register("x", Tensor::scalar(-1.0)).unwrap();
        let r = grad_check(&mut s, 1e-5, |s, want| {
            let mut g = Graph::new();
            let x = g.param(s, s.ids().next().unwrap());
            let l = g.log(x);
            evaluate(&g, l, want)
        });
        assert!(matches!(r, Err(Error::NonFiniteLoss(_))));
    }
}
