//! Post-hoc diagnostics: the value-vs-fingerprint sweep, the linear probe
//! predicting the exploration rate from recurrent hidden states, and metric
//! aggregation across seeds. Everything here is a pure function over frozen
//! snapshots.

use crate::agents::policy::fingerprint_augment;
use crate::nn::{gru_forward_traced, gru_step, mlp_forward, GruState, ModelKind, ParamSet};
use crate::replay::ReplayMemory;
use crate::{Error, Result};
use std::io::Write;

/// One evaluation row of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPoint {
    pub episode: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_td_loss: f64,
    pub mean_is_weight: f64,
}

/// Evaluation rows for one run, strictly increasing in episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub points: Vec<MetricPoint>,
}

pub fn write_metrics_csv<W: Write>(mut w: W, series: &MetricSeries) -> Result<()> {
    writeln!(w, "episode,win_rate,mean_return,mean_td_loss,mean_is_weight")?;
    for p in &series.points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.episode, p.win_rate, p.mean_return, p.mean_td_loss, p.mean_is_weight
        )?;
    }
    Ok(())
}

/// Cross-seed aggregate at one evaluation point: pointwise mean and the
/// standard deviation of the sample mean (sample std over k runs divided by
/// √k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatePoint {
    pub episode: usize,
    pub mean_win_rate: f64,
    pub sem_win_rate: f64,
    pub mean_return: f64,
    pub sem_return: f64,
    pub runs: usize,
}

fn mean_and_sem(values: &mut Vec<f64>) -> (f64, f64) {
    // Canonical summation order keeps the result exactly
    // permutation-invariant over runs.
    values.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt() / k.sqrt())
}

/// Pointwise mean and std-of-sample-mean over aligned runs.
pub fn aggregate(runs: &[MetricSeries]) -> Result<Vec<AggregatePoint>> {
    if runs.len() < 2 {
        return Err(Error::Config("aggregation needs at least two runs".into()));
    }
    let episodes: Vec<usize> = runs[0].points.iter().map(|p| p.episode).collect();
    for (i, run) in runs.iter().enumerate() {
        let got: Vec<usize> = run.points.iter().map(|p| p.episode).collect();
        if got != episodes {
            return Err(Error::Config(format!(
                "run {i} has misaligned evaluation points"
            )));
        }
    }
    Ok((0..episodes.len())
        .map(|idx| {
            let mut wins: Vec<f64> = runs.iter().map(|r| r.points[idx].win_rate).collect();
            let mut rets: Vec<f64> = runs.iter().map(|r| r.points[idx].mean_return).collect();
            let (mean_win_rate, sem_win_rate) = mean_and_sem(&mut wins);
            let (mean_return, sem_return) = mean_and_sem(&mut rets);
            AggregatePoint {
                episode: episodes[idx],
                mean_win_rate,
                sem_win_rate,
                mean_return,
                sem_return,
                runs: runs.len(),
            }
        })
        .collect())
}

/// Estimated value of one fixed initial observation as a function of the
/// exploration-rate slot in its fingerprint, with the episode slot pinned at
/// the end of training. The model must have been trained with fingerprint
/// inputs (its input width exceeds the base observation by exactly 2).
pub fn value_sweep(
    net: &ParamSet,
    base_obs: &[f64],
    eps_grid: &[f64],
    e_max: usize,
) -> Result<Vec<(f64, f64)>> {
    if net.input_dim != base_obs.len() + 2 {
        return Err(Error::Config(
            "value sweep needs a fingerprint-trained model (input = base observation + 2)".into(),
        ));
    }
    eps_grid
        .iter()
        .map(|&eps| {
            let x = fingerprint_augment(base_obs, eps, e_max, e_max);
            let q = match net.kind {
                ModelKind::Ff => mlp_forward(net, &x),
                ModelKind::Rnn => gru_step(net, &GruState::zeros(net.hidden_dim), &x).0,
            };
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok((eps, best))
        })
        .collect()
}

/// The default sweep grid: the schedule floor plus a coarse ladder to 1.
pub fn default_eps_grid() -> Vec<f64> {
    let mut grid = vec![0.02];
    for i in 1..=10 {
        grid.push(i as f64 / 10.0);
    }
    grid
}

pub fn write_sweep_csv<W: Write>(mut w: W, sweep: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "epsilon,value")?;
    for (eps, value) in sweep {
        writeln!(w, "{},{}", eps, value)?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg_rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Rows of (recurrent hidden state, exploration-rate label), one per episode
/// in a replay buffer, taken halfway through each episode.
#[derive(Debug, Clone, Default)]
pub struct ProbeDataset {
    pub hidden: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.len())
    }
}

/// Unrolls a trained recurrent model over every stored episode and records
/// the hidden state at step `floor(len/2)` (zero-indexed) with the episode's
/// collection-time exploration rate as label.
pub fn build_probe_dataset(
    net: &ParamSet,
    replay: &ReplayMemory,
    agent: usize,
) -> Result<ProbeDataset> {
    if net.kind != ModelKind::Rnn {
        return Err(Error::Config("the probe reads recurrent hidden states".into()));
    }
    let mut data = ProbeDataset::default();
    for ep in replay.iter() {
        let seq: Vec<Vec<f64>> = ep.steps.iter().map(|s| s.obs[agent].clone()).collect();
        let (_, trace) = gru_forward_traced(net, &seq);
        let mid = seq.len() / 2;
        data.hidden.push(trace.steps[mid].h_new.clone());
        data.labels.push(ep.collection_epsilon);
    }
    Ok(data)
}

pub fn write_probe_csv<W: Write>(mut w: W, data: &ProbeDataset) -> Result<()> {
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("h{i}")).collect();
    header.push("epsilon".into());
    writeln!(w, "{}", header.join(","))?;
    for (h, label) in data.hidden.iter().zip(&data.labels) {
        let mut row: Vec<String> = h.iter().map(|v| v.to_string()).collect();
        row.push(label.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Ordinary least squares with intercept, fit in-sample.
#[derive(Debug, Clone)]
pub struct ProbeFit {
    /// Feature weights followed by the intercept.
    pub weights: Vec<f64>,
    /// Coefficient of determination on the fit data.
    pub r2: f64,
    /// Set when the labels carry no variance, in which case r² is reported
    /// as 0.
    pub degenerate: bool,
}

const RIDGE_DAMPING: f64 = 1e-8;

/// Least squares via the normal equations with a tiny ridge damping term.
pub fn fit_probe(data: &ProbeDataset) -> Result<ProbeFit> {
    if data.is_empty() {
        return Err(Error::Config("probe dataset is empty".into()));
    }
    let n = data.len();
    let d = data.dim() + 1; // intercept last
    let design_row = |i: usize| -> Vec<f64> {
        let mut row = data.hidden[i].clone();
        row.push(1.0);
        row
    };
    let mut xtx = vec![vec![0.0f64; d]; d];
    let mut xty = vec![0.0f64; d];
    for i in 0..n {
        let row = design_row(i);
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += row[a] * row[b];
            }
            xty[a] += row[a] * data.labels[i];
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += RIDGE_DAMPING;
    }
    let weights = solve_linear(xtx, xty)?;
    let mean = data.labels.iter().sum::<f64>() / n as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let row = design_row(i);
        let pred: f64 = row.iter().zip(&weights).map(|(x, w)| x * w).sum();
        ss_res += (data.labels[i] - pred) * (data.labels[i] - pred);
        ss_tot += (data.labels[i] - mean) * (data.labels[i] - mean);
    }
    if ss_tot == 0.0 {
        return Ok(ProbeFit {
            weights,
            r2: 0.0,
            degenerate: true,
        });
    }
    Ok(ProbeFit {
        weights,
        r2: 1.0 - ss_res / ss_tot,
        degenerate: false,
    })
}

/// Gaussian elimination with partial pivoting; sized for probe systems
/// (at most a couple of hundred unknowns).
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Config("probe design matrix is singular".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ols_pinned_five_row_fixture() {
        // Hand-solved normal-equation fixture, frozen before the build.
        let data = ProbeDataset {
            hidden: vec![
                vec![0.2, 1.0],
                vec![0.5, -0.3],
                vec![-0.4, 0.8],
                vec![1.1, 0.1],
                vec![-0.9, -0.6],
            ],
            labels: vec![0.9, 0.3, 0.75, 0.1, 0.55],
        };
        let fit = fit_probe(&data).unwrap();
        assert!((fit.weights[0] - (-0.293853436766829)).abs() < 1e-9);
        assert!((fit.weights[1] - 0.343304715696376).abs() < 1e-9);
        assert!((fit.weights[2] - 0.480724399575959).abs() < 1e-9);
        assert!((fit.r2 - 0.889842915867154).abs() < 1e-9);
        assert!(!fit.degenerate);
    }

    #[test]
    fn exactly_linear_labels_fit_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hidden: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<f64> = hidden.iter().map(|h| 0.3 * h[2] + 0.1).collect();
        let fit = fit_probe(&ProbeDataset { hidden, labels }).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_noise_has_near_zero_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hidden: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fit = fit_probe(&ProbeDataset { hidden, labels }).unwrap();
        assert!(fit.r2 < 0.05, "null-case r² was {}", fit.r2);
    }

    #[test]
    fn degenerate_labels_flagged_with_zero_r2() {
        let data = ProbeDataset {
            hidden: vec![vec![0.1], vec![0.9], vec![0.4]],
            labels: vec![0.5, 0.5, 0.5],
        };
        let fit = fit_probe(&data).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.r2, 0.0);
    }

    #[test]
    fn residuals_are_orthogonal_to_the_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hidden: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<f64> = hidden
            .iter()
            .map(|h| 0.5 * h[0] - 0.2 * h[3] + rng.gen_range(-0.1..0.1))
            .collect();
        let data = ProbeDataset { hidden, labels };
        let fit = fit_probe(&data).unwrap();
        let d = data.dim() + 1;
        let mut xt_res = vec![0.0f64; d];
        for i in 0..data.len() {
            let mut row = data.hidden[i].clone();
            row.push(1.0);
            let pred: f64 = row.iter().zip(&fit.weights).map(|(x, w)| x * w).sum();
            let res = data.labels[i] - pred;
            for (acc, x) in xt_res.iter_mut().zip(&row) {
                *acc += x * res;
            }
        }
        for v in xt_res {
            assert!(v.abs() < 1e-6, "residual correlation {v}");
        }
    }

    #[test]
    fn aggregate_two_point_formula() {
        let mk = |wins: &[f64]| MetricSeries {
            points: wins
                .iter()
                .enumerate()
                .map(|(i, w)| MetricPoint {
                    episode: (i + 1) * 50,
                    win_rate: *w,
                    mean_return: 2.0 * w,
                    mean_td_loss: 0.0,
                    mean_is_weight: 1.0,
                })
                .collect(),
        };
        let runs = vec![mk(&[0.4]), mk(&[0.6])];
        let agg = aggregate(&runs).unwrap();
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean_win_rate - 0.5).abs() < 1e-15);
        // sample-std(0.4, 0.6)/√2 = 0.1
        assert!((agg[0].sem_win_rate - 0.1).abs() < 1e-12);

        // Identical runs → zero spread.
        let agg = aggregate(&vec![mk(&[0.4]), mk(&[0.4])]).unwrap();
        assert_eq!(agg[0].sem_win_rate, 0.0);
    }

    #[test]
    fn aggregate_pinned_five_run_fixture() {
        let runs: Vec<MetricSeries> = [0.42, 0.55, 0.38, 0.61, 0.49]
            .iter()
            .map(|w| MetricSeries {
                points: vec![MetricPoint {
                    episode: 100,
                    win_rate: *w,
                    mean_return: 0.0,
                    mean_td_loss: 0.0,
                    mean_is_weight: 1.0,
                }],
            })
            .collect();
        let agg = aggregate(&runs).unwrap();
        assert!((agg[0].mean_win_rate - 0.49).abs() < 1e-12);
        assert!((agg[0].sem_win_rate - 0.041833001326704).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_exactly_permutation_invariant() {
        let mk = |vals: [f64; 3]| MetricSeries {
            points: vals
                .iter()
                .enumerate()
                .map(|(i, w)| MetricPoint {
                    episode: (i + 1) * 10,
                    win_rate: *w,
                    mean_return: w * 3.113,
                    mean_td_loss: 0.0,
                    mean_is_weight: 1.0,
                })
                .collect(),
        };
        let a = mk([0.1, 0.7, 0.3]);
        let b = mk([0.65, 0.2, 0.9]);
        let c = mk([0.33, 0.41, 0.5]);
        let fwd = aggregate(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let rev = aggregate(&[c, b, a]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn aggregate_rejects_misaligned_or_single_runs() {
        let a = MetricSeries {
            points: vec![MetricPoint {
                episode: 50,
                win_rate: 0.5,
                mean_return: 0.0,
                mean_td_loss: 0.0,
                mean_is_weight: 1.0,
            }],
        };
        let mut b = a.clone();
        b.points[0].episode = 60;
        assert!(aggregate(&[a.clone()]).is_err());
        assert!(aggregate(&[a, b]).is_err());
    }

    #[test]
    fn constant_network_gives_a_flat_sweep() {
        // All-zero parameters output constant Q regardless of the fingerprint.
        let net = ParamSet::zeros(ModelKind::Ff, 6, 4, 3);
        let base = vec![0.3, 0.4, 0.1, 0.9];
        let sweep = value_sweep(&net, &base, &default_eps_grid(), 2500).unwrap();
        assert!(sweep.iter().all(|(_, v)| *v == sweep[0].1));
        assert_eq!(sweep.len(), 11);
    }

    #[test]
    fn single_point_sweep_equals_direct_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ParamSet::new_ff(6, 5, 3, &mut rng).unwrap();
        let base = vec![0.2, 0.8, 0.5, 0.1];
        let sweep = value_sweep(&net, &base, &[0.3], 2500).unwrap();
        let x = fingerprint_augment(&base, 0.3, 2500, 2500);
        let direct = mlp_forward(&net, &x)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sweep[0], (0.3, direct));
    }

    #[test]
    fn sweep_rejects_models_without_fingerprint_width() {
        let net = ParamSet::zeros(ModelKind::Ff, 4, 4, 3);
        let base = vec![0.3, 0.4, 0.1, 0.9];
        assert!(value_sweep(&net, &base, &[0.1], 2500).is_err());
    }

    #[test]
    fn sweep_is_repeatable_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ParamSet::new_gru(6, 4, 3, &mut rng).unwrap();
        let base = vec![0.2, 0.8, 0.5, 0.1];
        let a = value_sweep(&net, &base, &default_eps_grid(), 2500).unwrap();
        let b = value_sweep(&net, &base, &default_eps_grid(), 2500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spearman_detects_monotone_relations() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let down: Vec<f64> = xs.iter().map(|x| 10.0 - x * x).collect();
        assert!((spearman(&xs, &down) + 1.0).abs() < 1e-12);
        let up: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert!((spearman(&xs, &up) - 1.0).abs() < 1e-12);
        let flat = [2.0, 2.0, 2.0, 2.0, 2.0];
        assert_eq!(spearman(&xs, &flat), 0.0);
    }
}
