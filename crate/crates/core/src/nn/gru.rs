//! Single-layer GRU Q-network with backprop through time over full episodes.
//!
//! Gate convention: `h' = (1 − z) ⊙ h + z ⊙ ĥ`, with the reset gate applied
//! to `h` inside the candidate. With all-zero weights this halves the hidden
//! state exactly (σ(0) = 1/2, tanh(0) = 0), which the tests pin down.

use super::{sigmoid, Gradients, Layers, ModelKind, ParamSet};

/// Recurrent hidden state, zero-initialised at episode start. After at least
/// one step every element lies in (−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GruState(pub Vec<f64>);

impl GruState {
    pub fn zeros(hidden_dim: usize) -> Self {
        GruState(vec![0.0; hidden_dim])
    }
}

#[derive(Debug, Clone)]
pub struct GruStepTrace {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    /// r ⊙ h_prev, the candidate's recurrent input.
    pub hr: Vec<f64>,
    pub c: Vec<f64>,
    pub h_new: Vec<f64>,
}

/// Forward trace over a full unroll; one entry per step.
#[derive(Debug, Clone, Default)]
pub struct GruTrace {
    pub steps: Vec<GruStepTrace>,
}

/// One recurrent step: gate update plus Q readout from the new hidden state.
pub fn gru_step(ps: &ParamSet, h: &GruState, x: &[f64]) -> (Vec<f64>, GruState) {
    let (q, step) = gru_step_traced(ps, &h.0, x);
    (q, GruState(step.h_new))
}

fn gru_step_traced(ps: &ParamSet, h_prev: &[f64], x: &[f64]) -> (Vec<f64>, GruStepTrace) {
    assert_eq!(ps.kind, ModelKind::Rnn, "gru_step on a non-recurrent parameter set");
    assert_eq!(x.len(), ps.input_dim, "input width differs from declared input_dim");
    assert_eq!(h_prev.len(), ps.hidden_dim);
    let Layers::Gru { cell, head } = &ps.layers else {
        unreachable!()
    };
    let hd = ps.hidden_dim;

    let mut z = vec![0.0; hd];
    cell.wz.matv(x, &mut z);
    cell.uz.matv_acc(h_prev, &mut z);
    for (v, b) in z.iter_mut().zip(&cell.bz) {
        *v = sigmoid(*v + b);
    }

    let mut r = vec![0.0; hd];
    cell.wr.matv(x, &mut r);
    cell.ur.matv_acc(h_prev, &mut r);
    for (v, b) in r.iter_mut().zip(&cell.br) {
        *v = sigmoid(*v + b);
    }

    let hr: Vec<f64> = r.iter().zip(h_prev).map(|(rv, hv)| rv * hv).collect();

    let mut c = vec![0.0; hd];
    cell.wc.matv(x, &mut c);
    cell.uc.matv_acc(&hr, &mut c);
    for (v, b) in c.iter_mut().zip(&cell.bc) {
        *v = (*v + b).tanh();
    }

    let h_new: Vec<f64> = z
        .iter()
        .zip(h_prev)
        .zip(&c)
        .map(|((zv, hv), cv)| (1.0 - zv) * hv + zv * cv)
        .collect();

    let mut q = vec![0.0; ps.n_actions];
    head.forward(&h_new, &mut q);

    let trace = GruStepTrace {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        hr,
        c,
        h_new,
    };
    (q, trace)
}

/// Unrolls the cell from the zero state over a whole episode, returning the
/// per-step Q-values and the trace needed for BPTT.
pub fn gru_forward_traced(ps: &ParamSet, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, GruTrace) {
    let mut h = vec![0.0; ps.hidden_dim];
    let mut qs = Vec::with_capacity(xs.len());
    let mut trace = GruTrace {
        steps: Vec::with_capacity(xs.len()),
    };
    for x in xs {
        let (q, step) = gru_step_traced(ps, &h, x);
        h.copy_from_slice(&step.h_new);
        qs.push(q);
        trace.steps.push(step);
    }
    (qs, trace)
}

/// Backprop through time across the whole unroll. `upstream[t]` is `dL/dq_t`;
/// gradients are accumulated into `grads`.
pub fn gru_backward(ps: &ParamSet, trace: &GruTrace, upstream: &[Vec<f64>], grads: &mut Gradients) {
    assert_eq!(
        trace.steps.len(),
        upstream.len(),
        "upstream must cover every unrolled step"
    );
    let Layers::Gru { cell, head } = &ps.layers else {
        panic!("gru_backward on a non-recurrent parameter set");
    };
    let Layers::Gru {
        cell: gc,
        head: gh,
    } = &mut grads.layers
    else {
        panic!("gradient shape does not match gru parameters");
    };
    let hd = ps.hidden_dim;

    // dL/dh flowing backwards into the step about to be processed.
    let mut dh_next = vec![0.0; hd];
    let mut dh = vec![0.0; hd];
    let mut dz = vec![0.0; hd];
    let mut dc = vec![0.0; hd];
    let mut dhr = vec![0.0; hd];
    let mut dr = vec![0.0; hd];

    for (step, dq) in trace.steps.iter().zip(upstream).rev() {
        assert_eq!(dq.len(), ps.n_actions);
        // Head readout on h_new.
        gh.w.outer_acc(dq, &step.h_new);
        for (b, d) in gh.b.iter_mut().zip(dq) {
            *b += d;
        }
        // dL/dh_new = head backprop + gradient from the future step.
        let mut dh_new = dh_next.clone();
        head.w.tmatv_acc(dq, &mut dh_new);

        // h' = (1 − z) h + z c
        for i in 0..hd {
            dz[i] = dh_new[i] * (step.c[i] - step.h_prev[i]);
            dc[i] = dh_new[i] * step.z[i];
            dh[i] = dh_new[i] * (1.0 - step.z[i]);
        }

        // Candidate: c = tanh(Wc x + Uc (r ⊙ h) + bc)
        for i in 0..hd {
            dc[i] *= 1.0 - step.c[i] * step.c[i];
        }
        gc.wc.outer_acc(&dc, &step.x);
        gc.uc.outer_acc(&dc, &step.hr);
        for (b, d) in gc.bc.iter_mut().zip(&dc) {
            *b += d;
        }
        dhr.iter_mut().for_each(|v| *v = 0.0);
        cell.uc.tmatv_acc(&dc, &mut dhr);
        for i in 0..hd {
            dr[i] = dhr[i] * step.h_prev[i];
            dh[i] += dhr[i] * step.r[i];
        }

        // Reset gate: r = σ(Wr x + Ur h + br)
        for i in 0..hd {
            dr[i] *= step.r[i] * (1.0 - step.r[i]);
        }
        gc.wr.outer_acc(&dr, &step.x);
        gc.ur.outer_acc(&dr, &step.h_prev);
        for (b, d) in gc.br.iter_mut().zip(&dr) {
            *b += d;
        }
        cell.ur.tmatv_acc(&dr, &mut dh);

        // Update gate: z = σ(Wz x + Uz h + bz)
        for i in 0..hd {
            dz[i] *= step.z[i] * (1.0 - step.z[i]);
        }
        gc.wz.outer_acc(&dz, &step.x);
        gc.uz.outer_acc(&dz, &step.h_prev);
        for (b, d) in gc.bz.iter_mut().zip(&dz) {
            *b += d;
        }
        cell.uz.tmatv_acc(&dz, &mut dh);

        std::mem::swap(&mut dh_next, &mut dh);
        dh.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, GruCell, Mat};

    fn pinned_cell() -> ParamSet {
        // Hand-evaluated one-step fixture, frozen before the implementation.
        let mut ps = ParamSet::zeros(ModelKind::Rnn, 2, 2, 1);
        ps.layers = Layers::Gru {
            cell: GruCell {
                wz: Mat::from_rows(&[&[0.1, 0.2], &[-0.3, 0.4]]),
                uz: Mat::from_rows(&[&[0.5, -0.1], &[0.2, 0.3]]),
                bz: vec![0.05, -0.05],
                wr: Mat::from_rows(&[&[0.2, -0.2], &[0.1, 0.1]]),
                ur: Mat::from_rows(&[&[-0.4, 0.3], &[0.2, -0.1]]),
                br: vec![0.15, 0.0],
                wc: Mat::from_rows(&[&[0.3, 0.1], &[-0.2, 0.5]]),
                uc: Mat::from_rows(&[&[0.1, 0.4], &[-0.3, 0.2]]),
                bc: vec![0.0, 0.1],
            },
            head: Dense {
                w: Mat::from_rows(&[&[1.0, -1.0]]),
                b: vec![0.5],
            },
        };
        ps
    }

    #[test]
    fn zero_weights_halve_the_hidden_state_exactly() {
        let ps = ParamSet::zeros(ModelKind::Rnn, 3, 4, 2);
        let h = GruState(vec![0.8, -0.4, 0.2, -0.6]);
        let (q, h2) = gru_step(&ps, &h, &[1.0, 2.0, 3.0]);
        assert_eq!(h2.0, vec![0.4, -0.2, 0.1, -0.3]);
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_state_zero_input_is_a_fixed_point() {
        let ps = ParamSet::zeros(ModelKind::Rnn, 2, 3, 1);
        let (_, h2) = gru_step(&ps, &GruState::zeros(3), &[0.0, 0.0]);
        assert_eq!(h2.0, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pinned_cell_one_step_matches_frozen_values() {
        let ps = pinned_cell();
        let h = GruState(vec![0.3, -0.2]);
        let (q, h2) = gru_step(&ps, &h, &[1.0, -0.5]);
        assert!((h2.0[0] - 0.25601899532613653).abs() < 1e-12);
        assert!((h2.0[1] - (-0.27276933648498558)).abs() < 1e-12);
        assert!((q[0] - 1.0287883318111222).abs() < 1e-12);
    }

    #[test]
    fn hidden_state_stays_inside_unit_box() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let ps = ParamSet::new_gru(4, 6, 3, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|t| (0..4).map(|i| ((t * 4 + i) as f64 * 0.37).sin() * 3.0).collect())
            .collect();
        let (_, trace) = gru_forward_traced(&ps, &xs);
        for step in &trace.steps {
            for v in &step.h_new {
                assert!(v.abs() < 1.0);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ps = pinned_cell();
        let xs = vec![vec![1.0, -0.5], vec![0.2, 0.3]];
        let (_, trace) = gru_forward_traced(&ps, &xs);
        let mut grads = ps.zero_grads();
        gru_backward(&ps, &trace, &[vec![0.0], vec![0.0]], &mut grads);
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
    }
}
