//! Feed-forward Q-network: two ReLU hidden layers and a linear output head.

use super::{Gradients, Layers, ModelKind, ParamSet};

/// Per-call forward trace, kept so the matching backward pass can replay the
/// activations without recomputing them.
#[derive(Debug, Clone)]
pub struct FfTrace {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub h1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h2: Vec<f64>,
}

/// Q-values for every action. Pure: identical `(params, x)` give bit-identical
/// output.
pub fn mlp_forward(ps: &ParamSet, x: &[f64]) -> Vec<f64> {
    let (q, _) = mlp_forward_traced(ps, x);
    q
}

pub fn mlp_forward_traced(ps: &ParamSet, x: &[f64]) -> (Vec<f64>, FfTrace) {
    assert_eq!(ps.kind, ModelKind::Ff, "mlp_forward on a non-ff parameter set");
    assert_eq!(x.len(), ps.input_dim, "input width differs from declared input_dim");
    let Layers::Ff { l1, l2, head } = &ps.layers else {
        unreachable!()
    };
    let mut z1 = vec![0.0; ps.hidden_dim];
    l1.forward(x, &mut z1);
    let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let mut z2 = vec![0.0; ps.hidden_dim];
    l2.forward(&h1, &mut z2);
    let h2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    let mut q = vec![0.0; ps.n_actions];
    head.forward(&h2, &mut q);
    let trace = FfTrace {
        x: x.to_vec(),
        z1,
        h1,
        z2,
        h2,
    };
    (q, trace)
}

/// Accumulates exact gradients of a scalar loss into `grads`, given the
/// upstream gradient `dL/dq` for each traced forward call.
pub fn mlp_backward(ps: &ParamSet, traces: &[FfTrace], upstream: &[Vec<f64>], grads: &mut Gradients) {
    assert_eq!(
        traces.len(),
        upstream.len(),
        "one upstream gradient per forward trace"
    );
    let Layers::Ff { l2, head, .. } = &ps.layers else {
        panic!("mlp_backward on a non-ff parameter set");
    };
    let Layers::Ff {
        l1: g1,
        l2: g2,
        head: gh,
    } = &mut grads.layers
    else {
        panic!("gradient shape does not match ff parameters");
    };
    let mut dh2 = vec![0.0; ps.hidden_dim];
    let mut dh1 = vec![0.0; ps.hidden_dim];
    for (trace, dq) in traces.iter().zip(upstream) {
        assert_eq!(dq.len(), ps.n_actions);
        // head: q = Wh h2 + bh
        gh.w.outer_acc(dq, &trace.h2);
        for (b, d) in gh.b.iter_mut().zip(dq) {
            *b += d;
        }
        dh2.iter_mut().for_each(|v| *v = 0.0);
        head.w.tmatv_acc(dq, &mut dh2);
        // layer 2 ReLU
        for (d, z) in dh2.iter_mut().zip(&trace.z2) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        g2.w.outer_acc(&dh2, &trace.h1);
        for (b, d) in g2.b.iter_mut().zip(&dh2) {
            *b += d;
        }
        dh1.iter_mut().for_each(|v| *v = 0.0);
        l2.w.tmatv_acc(&dh2, &mut dh1);
        // layer 1 ReLU
        for (d, z) in dh1.iter_mut().zip(&trace.z1) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        g1.w.outer_acc(&dh1, &trace.x);
        for (b, d) in g1.b.iter_mut().zip(&dh1) {
            *b += d;
        }
    }
}
