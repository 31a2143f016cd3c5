//! Reverse-mode sweep over the implicit tape.
//!
//! Nodes are ordered by creation id, which is a valid topological order
//! because an op's output is always created after its inputs. Backward
//! rules accumulate into gradients; they never overwrite.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::{Storage, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn autograd_enabled() -> bool {
    GRAD_ENABLED.with(|f| f.get())
}

/// Run `f` with tape recording disabled (inference, metric computation).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|f| f.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|f| f.replace(false));
    let _guard = Guard(prev);
    f()
}

pub(super) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }

    let seed = match &*loss.data() {
        Storage::F32(_) => Storage::F32(vec![1.0]),
        Storage::F64(_) => Storage::F64(vec![1.0]),
        Storage::U8(_) => return Err(Error::shape("backward", "loss must be float")),
    };

    if loss.inner.node.is_none() {
        if loss.requires_grad() {
            loss.accumulate_leaf_grad(&seed);
        }
        return Ok(());
    }

    // Collect tensors reachable from the loss that carry nodes.
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<Tensor> = vec![loss.clone()];
    visited.insert(loss.id());
    while let Some(t) = stack.pop() {
        if let Some(node) = &t.inner.node {
            for p in &node.parents {
                if p.inner.node.is_some() && visited.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
    }
    order.sort_by(|a, b| b.id().cmp(&a.id()));

    let mut grads: HashMap<u64, Storage> = HashMap::new();
    grads.insert(loss.id(), seed);

    for t in &order {
        let Some(g) = grads.remove(&t.id()) else { continue };
        let node = t.inner.node.as_ref().expect("ordered tensors carry nodes");
        let contribs = (node.backward)(&g);
        debug_assert_eq!(contribs.len(), node.parents.len());
        for (parent, contrib) in node.parents.iter().zip(contribs) {
            let Some(c) = contrib else { continue };
            debug_assert_eq!(c.len(), parent.numel(), "gradient extent mismatch");
            if parent.inner.node.is_some() {
                grads
                    .entry(parent.id())
                    .and_modify(|acc| acc.add_assign(&c))
                    .or_insert(c);
            } else if parent.requires_grad() {
                parent.accumulate_leaf_grad(&c);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::tensor::ops;
    use crate::tensor::{DType, Storage, Tensor};

    #[test]
    fn sum_backward_gives_ones() {
        let x = Tensor::param(&[2, 3], Storage::F64(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let loss = ops::sum(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_f64().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn quadratic_form_backward_is_2x() {
        let x = Tensor::param(&[3], Storage::F64(vec![1.0, -2.0, 0.5])).unwrap();
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::sum(&sq).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_f64().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], Storage::F64(vec![1.0, 1.0])).unwrap();
        for _ in 0..2 {
            let loss = ops::sum(&x).unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad_f64().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], Storage::F64(vec![1.0, 1.0])).unwrap();
        let y = ops::scale(&x, 2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_nodes() {
        let x = Tensor::param(&[2], Storage::F32(vec![1.0, 2.0])).unwrap();
        let y = super::no_grad(|| ops::scale(&x, 2.0).unwrap());
        assert!(y.inner.node.is_none());
        let z = ops::scale(&x, 2.0).unwrap();
        assert!(z.inner.node.is_some());
    }

    #[test]
    fn diamond_graph_accumulates_through_both_paths() {
        // y = 2x + 3x => dy/dx = 5
        let x = Tensor::param(&[1], Storage::F64(vec![1.0])).unwrap();
        let a = ops::scale(&x, 2.0).unwrap();
        let b = ops::scale(&x, 3.0).unwrap();
        let y = ops::add(&a, &b).unwrap();
        let loss = ops::sum(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_f64().unwrap(), vec![5.0]);
    }

    #[test]
    fn grad_dtype_matches_param() {
        let x = Tensor::param(&[2], Storage::F32(vec![1.0, 2.0])).unwrap();
        let loss = ops::sum(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().dtype(), DType::F32);
    }
}
