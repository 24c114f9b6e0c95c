//! Set-prediction loss: pairwise matching costs, optimal one-to-one
//! assignment of ground-truth lanes to predictions, and the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::head::LaneTarget;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Probability floor applied before every log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    pub off: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { obj: 5.0, cls: 5.0, off: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.obj, self.cls, self.off].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights {self:?} must be non-negative")));
        }
        Ok(())
    }
}

/// `−log S_{i1}`.
pub fn cost_obj(scores: &Tensor, i: usize) -> f64 {
    -scores.get(&[i, 1]).max(PROB_FLOOR).ln()
}

/// Cross-entropy of prediction `i`'s class block against a target score row
/// `[2 + N]` whose class block is one-hot or a simplex.
pub fn cost_cls(scores: &Tensor, i: usize, target: &Tensor) -> f64 {
    let n = scores.shape()[1] - 2;
    (0..n)
        .map(|k| -target.data()[2 + k] * scores.get(&[i, 2 + k]).max(PROB_FLOOR).ln())
        .sum()
}

fn mean_l1(pred: &[f64], target: &[f64], pixels: usize) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pixels as f64
}

/// Mean over pixels of the per-pixel L1 offset error, image term plus BEV
/// term. `image: [L, N_a, 2]`, `bev: [L, N_b, 3]`.
pub fn cost_off(image: &Tensor, bev: &Tensor, i: usize, target: &LaneTarget) -> Result<f64> {
    let (na, nb) = (image.shape()[1], bev.shape()[1]);
    if image.shape()[1..] != *target.image.shape() || bev.shape()[1..] != *target.bev.shape() {
        return Err(dim_err!(
            "offset maps {:?}/{:?} vs targets {:?}/{:?}",
            image.shape(),
            bev.shape(),
            target.image.shape(),
            target.bev.shape()
        ));
    }
    let a = &image.data()[i * na * 2..(i + 1) * na * 2];
    let b = &bev.data()[i * nb * 3..(i + 1) * nb * 3];
    Ok(mean_l1(a, target.image.data(), na) + mean_l1(b, target.bev.data(), nb))
}

/// Cost matrices indexed `[prediction][ground truth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCosts {
    pub total: Vec<Vec<f64>>,
    pub obj: Vec<Vec<f64>>,
    pub cls: Vec<Vec<f64>>,
    pub off: Vec<Vec<f64>>,
}

/// Pairwise weighted costs of every prediction against every target.
pub fn match_costs(
    scores: &Tensor,
    image: &Tensor,
    bev: &Tensor,
    targets: &[LaneTarget],
    weights: &LossWeights,
) -> Result<MatchCosts> {
    let l = scores.shape()[0];
    if image.shape()[0] != l || bev.shape()[0] != l {
        return Err(dim_err!("{l} score rows vs offset maps {:?}/{:?}", image.shape(), bev.shape()));
    }
    let m = targets.len();
    let mut c = MatchCosts {
        total: vec![vec![0.0; m]; l],
        obj: vec![vec![0.0; m]; l],
        cls: vec![vec![0.0; m]; l],
        off: vec![vec![0.0; m]; l],
    };
    for i in 0..l {
        let obj = cost_obj(scores, i);
        for (j, t) in targets.iter().enumerate() {
            let cls = cost_cls(scores, i, &t.scores);
            let off = cost_off(image, bev, i, t)?;
            c.obj[i][j] = obj;
            c.cls[i][j] = cls;
            c.off[i][j] = off;
            c.total[i][j] = weights.obj * obj + weights.cls * cls + weights.off * off;
        }
    }
    Ok(c)
}

/// Ground-truth index `j` is matched to prediction `pred_of_gt[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pred_of_gt: Vec<usize>,
    pub predictions: usize,
}

impl Assignment {
    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pred_of_gt.iter().enumerate().map(|(j, &i)| cost[i][j]).sum()
    }

    /// Predictions left without a ground-truth lane, ascending.
    pub fn unmatched(&self) -> Vec<usize> {
        (0..self.predictions).filter(|i| !self.pred_of_gt.contains(i)).collect()
    }
}

/// Minimum-cost assignment of the `m` rows of `a` (row-major `m × n`,
/// `m ≤ n`) to distinct columns, by shortest augmenting paths with
/// potentials. Returns the column of each row.
fn solve(a: &[f64], m: usize, n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; m];
    for j in 1..=n {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

fn optimum(a: &[f64], m: usize, n: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    solve(a, m, n).iter().enumerate().map(|(r, &c)| a[r * n + c]).sum()
}

/// Optimal assignment for a cost matrix indexed `[prediction][ground
/// truth]` (`L × M`). Among optimal assignments the one chosen gives ground
/// truth 0 the lowest possible prediction, then ground truth 1, and so on.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let l = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(dim_err!("ragged cost matrix"));
    }
    if m > l {
        return Err(Error::Contract(format!("{m} ground-truth lanes exceed {l} predictions")));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    // rows: ground truth, columns: predictions
    let a: Vec<f64> = (0..m).flat_map(|j| cost.iter().map(move |r| r[j])).collect();
    let best = optimum(&a, m, l);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut fixed_cost = 0.0;
    let mut taken = vec![false; l];
    let mut pred_of_gt = Vec::with_capacity(m);
    for j in 0..m {
        let rest_rows = m - j - 1;
        let mut chosen = None;
        for i in (0..l).filter(|&i| !taken[i]) {
            let cols: Vec<usize> = (0..l).filter(|&c| !taken[c] && c != i).collect();
            let mut sub = Vec::with_capacity(rest_rows * cols.len());
            for r in j + 1..m {
                sub.extend(cols.iter().map(|&c| a[r * l + c]));
            }
            let total = fixed_cost + a[j * l + i] + optimum(&sub, rest_rows, cols.len());
            if total <= best + tol {
                chosen = Some(i);
                break;
            }
        }
        // the unconstrained optimum always admits some completion
        let i = chosen.expect("an optimal completion exists");
        fixed_cost += a[j * l + i];
        taken[i] = true;
        pred_of_gt.push(i);
    }
    Ok(Assignment { pred_of_gt, predictions: l })
}

/// Differentiable training loss. `scores: [L, 2+N]`, `image: [L, N_a, 2]`,
/// `bev: [L, N_b, 3]`; the assignment is a constant.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    image: Var,
    bev: Var,
    targets: &[LaneTarget],
    assignment: &Assignment,
    weights: &LossWeights,
) -> Result<Var> {
    let (l, width) = match tape.shape(scores) {
        &[l, w] if w >= 3 => (l, w),
        s => return Err(dim_err!("scores must be [L, 2+N], got {s:?}")),
    };
    let classes = width - 2;
    let m = targets.len();
    if assignment.pred_of_gt.len() != m || assignment.predictions != l {
        return Err(Error::Contract("assignment does not match predictions and targets".into()));
    }
    let mut terms = Vec::new();
    if m > 0 {
        let rows = &assignment.pred_of_gt;
        let matched = tape.gather_rows(scores, rows)?;
        let fg = tape.narrow(matched, 1, 1, 1)?;
        let fg = tape.clamp_min(fg, PROB_FLOOR)?;
        let fg = tape.log(fg)?;
        let fg = tape.sum(fg)?;
        terms.push(tape.scale(fg, -weights.obj / m as f64)?);

        let cls = tape.narrow(matched, 1, 2, classes)?;
        let cls = tape.clamp_min(cls, PROB_FLOOR)?;
        let cls = tape.log(cls)?;
        let onehot: Vec<T> = targets
            .iter()
            .flat_map(|t| t.scores.data()[2..].iter().map(|&v| T::from_real(v)))
            .collect();
        let onehot = tape.constant(Tensor::new(&[m, classes], onehot)?);
        let cls = tape.mul(cls, onehot)?;
        let cls = tape.sum(cls)?;
        terms.push(tape.scale(cls, -weights.cls / m as f64)?);

        for (map, pick) in [(image, 0usize), (bev, 1)] {
            let shape = tape.shape(map).to_vec();
            if shape.len() != 3 || shape[0] != l {
                return Err(dim_err!("offset map {shape:?} does not match {l} predictions"));
            }
            let mut data = Vec::with_capacity(m * shape[1] * shape[2]);
            for t in targets {
                let tm = if pick == 0 { &t.image } else { &t.bev };
                if tm.shape() != &shape[1..] {
                    return Err(dim_err!("target {:?} vs prediction {:?}", tm.shape(), &shape[1..]));
                }
                data.extend(tm.data().iter().map(|&v| T::from_real(v)));
            }
            let target = tape.constant(Tensor::new(&[m, shape[1], shape[2]], data)?);
            let pred = tape.gather_rows(map, rows)?;
            let diff = tape.sub(pred, target)?;
            let diff = tape.abs(diff)?;
            let diff = tape.sum(diff)?;
            terms.push(tape.scale(diff, weights.off / (m * shape[1]) as f64)?);
        }
    }
    let unmatched = assignment.unmatched();
    if !unmatched.is_empty() {
        let rest = tape.gather_rows(scores, &unmatched)?;
        let bg = tape.narrow(rest, 1, 0, 1)?;
        let bg = tape.clamp_min(bg, PROB_FLOOR)?;
        let bg = tape.log(bg)?;
        let bg = tape.sum(bg)?;
        terms.push(tape.scale(bg, -weights.obj / unmatched.len() as f64)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}
