use std::collections::{HashMap, HashSet};

use crate::tensor::{no_grad, Op, Tensor};

/// Reverse-mode gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded in the graph and
/// can be differentiated again (needed for second-order meta-gradients).
/// Without it they are constants. Inputs that `output` does not depend on get
/// zero gradients.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got shape {:?}", output.shape());
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let order = relevant_topo_order(output, &targets);
    let relevant: HashSet<u64> = order.iter().map(Tensor::id).collect();
    let need = |t: &Tensor| relevant.contains(&t.id());

    let _guard = (!create_graph).then(no_grad);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Tensor::constant(output.shape().to_vec(), vec![1.0]));
    }

    for node in order.iter().rev() {
        let Some(op) = node.0.op.as_ref() else { continue };
        let gy = if targets.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        let Some(gy) = gy else { continue };
        let parents = op.parents();
        if !parents.iter().any(|p| need(p)) {
            continue;
        }
        let parent_grads = backward_op(op, node, &gy, &need);
        for (p, g) in parents.into_iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&g),
                None => g,
            };
            grads.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) if create_graph => g.clone(),
            Some(g) => g.detach(),
            None => Tensor::zeros(t.shape()),
        })
        .collect()
}

/// Nodes lying on some path from `output` back to a target, in topological
/// order (parents before children). Subgraphs that never reach a target are
/// pruned so unrolled histories are not traversed needlessly.
fn relevant_topo_order(output: &Tensor, targets: &HashSet<u64>) -> Vec<Tensor> {
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut order = Vec::new();
    // (node, parents-expanded)
    let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if !t.requires_grad() {
            continue;
        }
        if expanded {
            let mut is_rel = targets.contains(&t.id());
            if let Some(op) = t.0.op.as_ref() {
                for p in op.parents() {
                    is_rel |= relevant.get(&p.id()).copied().unwrap_or(false);
                }
            }
            relevant.insert(t.id(), is_rel);
            if is_rel {
                order.push(t);
            }
            continue;
        }
        if relevant.contains_key(&t.id()) {
            continue;
        }
        // Placeholder marks the node as in-progress so diamonds are expanded once.
        relevant.insert(t.id(), false);
        stack.push((t.clone(), true));
        if let Some(op) = t.0.op.as_ref() {
            for p in op.parents() {
                if p.requires_grad() && !relevant.contains_key(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn backward_op(op: &Op, out: &Tensor, gy: &Tensor, need: &dyn Fn(&Tensor) -> bool) -> Vec<Option<Tensor>> {
    match op {
        Op::Add(a, b) => vec![when(need, a, || gy.sum_to(a.shape())), when(need, b, || gy.sum_to(b.shape()))],
        Op::Sub(a, b) => vec![when(need, a, || gy.sum_to(a.shape())), when(need, b, || gy.neg().sum_to(b.shape()))],
        Op::Mul(a, b) => vec![
            when(need, a, || gy.mul(b).sum_to(a.shape())),
            when(need, b, || gy.mul(a).sum_to(b.shape())),
        ],
        Op::Div(a, b) => vec![
            when(need, a, || gy.div(b).sum_to(a.shape())),
            when(need, b, || gy.mul(out).div(b).neg().sum_to(b.shape())),
        ],
        Op::Neg(_) => vec![Some(gy.neg())],
        Op::Scale(_, c) => vec![Some(gy.scale(*c))],
        Op::Exp(_) => vec![Some(gy.mul(out))],
        Op::Log(a) => vec![Some(gy.div(a))],
        Op::Sqrt(_) => vec![Some(gy.scale(0.5).div(out))],
        Op::SumTo(a) => vec![Some(gy.broadcast_to(a.shape()))],
        Op::BroadcastTo(a) => vec![Some(gy.sum_to(a.shape()))],
        Op::Reshape(a) => vec![Some(gy.reshape(a.shape()))],
        Op::Transpose(_) => vec![Some(gy.t())],
        Op::MatMul(a, b) => vec![
            when(need, a, || gy.matmul(&b.t())),
            when(need, b, || a.t().matmul(gy)),
        ],
        Op::Conv { x, w, pad } => vec![
            when(need, x, || Tensor::conv2d_input_grad(gy, w, *pad, x.shape())),
            when(need, w, || Tensor::conv2d_weight_grad(x, gy, *pad, w.shape())),
        ],
        // z = convᵀ(g, w):  dg = conv(gz, w),  dw = weight_grad(gz, g)
        Op::ConvInputGrad { gy: g, w, pad } => vec![
            when(need, g, || gy.conv2d(w, *pad)),
            when(need, w, || Tensor::conv2d_weight_grad(gy, g, *pad, w.shape())),
        ],
        // u = weight_grad(x, g):  dx = convᵀ(g, gu),  dg = conv(x, gu)
        Op::ConvWeightGrad { x, gy: g, pad } => vec![
            when(need, x, || Tensor::conv2d_input_grad(g, gy, *pad, x.shape())),
            when(need, g, || x.conv2d(gy, *pad)),
        ],
        Op::Gather(a, idx) => vec![Some(gy.scatter_add(idx.clone(), a.shape()))],
        Op::ScatterAdd(a, idx) => vec![Some(gy.gather(idx.clone(), a.shape()))],
    }
}

fn when(need: &dyn Fn(&Tensor) -> bool, parent: &Tensor, f: impl FnOnce() -> Tensor) -> Option<Tensor> {
    need(parent).then(f)
}
