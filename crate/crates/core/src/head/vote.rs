use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::BevLayout;
use crate::numerics::Tensor;

/// Object threshold `t` and lane width `w`. `w` is both the Gaussian width
/// of a vote and the count a cell needs to be emitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteParams {
    pub threshold: f64,
    pub width: f64,
}

impl Default for VoteParams {
    fn default() -> Self {
        Self { threshold: 0.7, width: 16.0 }
    }
}

impl VoteParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("object threshold {} must lie in (0, 1)", self.threshold)));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Config(format!("lane width {} must be positive", self.width)));
        }
        Ok(())
    }
}

/// One decoded lane. `points` are `[x, y, z]` meters for BEV decoding or
/// `[u, v]` feature pixels for image-view decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedLane<P> {
    pub class: usize,
    pub score: f64,
    pub points: Vec<P>,
    #[serde(skip)]
    pub query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneDetections<P = [f64; 3]> {
    pub lanes: Vec<DetectedLane<P>>,
}

/// `⌊x + 0.5⌋`.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

fn check_scores(scores: &Tensor, lanes: usize) -> Result<usize> {
    match scores.shape() {
        &[l, k] if l == lanes && k >= 3 => Ok(k - 2),
        s => Err(dim_err!("scores {s:?} do not match {lanes} lanes")),
    }
}

fn class_of(scores: &Tensor, i: usize, classes: usize) -> usize {
    // first maximum wins
    (0..classes).fold(0, |best, k| if scores.get(&[i, 2 + k]) > scores.get(&[i, 2 + best]) { k } else { best })
}

/// Vote accumulation for one lane over a `rows × cols` offset map whose
/// channels 0 and 1 are the column and row displacement. Returns the
/// per-cell counts.
fn accumulate(offsets: &[f64], channels: usize, rows: usize, cols: usize, width: f64) -> Vec<f64> {
    let mut counts = vec![0.0; rows * cols];
    for j in 0..rows {
        for k in 0..cols {
            let base = (j * cols + k) * channels;
            let (r0, r1) = (offsets[base], offsets[base + 1]);
            let x = round_half_up(k as f64 + r0);
            let y = round_half_up(j as f64 + r1);
            if x < 0 || y < 0 || x >= cols as i64 || y >= rows as i64 {
                continue;
            }
            counts[y as usize * cols + x as usize] += (-(r0 * r0 + r1 * r1) / (2.0 * width * width)).exp();
        }
    }
    counts
}

fn decode<P>(
    offsets: &Tensor,
    scores: &Tensor,
    rows: usize,
    cols: usize,
    channels: usize,
    params: &VoteParams,
    point: impl Fn(&[f64], usize, usize) -> P,
    key: impl Fn(&P) -> (f64, f64),
) -> Result<LaneDetections<P>> {
    params.validate()?;
    let lanes = match offsets.shape() {
        &[l, n, ch] if n == rows * cols && ch == channels => l,
        s => return Err(dim_err!("offset map {s:?} does not match {rows}×{cols}×{channels}")),
    };
    let classes = check_scores(scores, lanes)?;
    let stride = rows * cols * channels;
    let mut out = Vec::new();
    for i in 0..lanes {
        let score = scores.get(&[i, 1]);
        if score < params.threshold {
            continue;
        }
        let map = &offsets.data()[i * stride..(i + 1) * stride];
        let counts = accumulate(map, channels, rows, cols, params.width);
        let mut points: Vec<P> = (0..rows * cols)
            .filter(|&c| counts[c] >= params.width)
            .map(|c| point(map, c / cols, c % cols))
            .collect();
        points.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        out.push(DetectedLane { class: class_of(scores, i, classes), score, points, query: i });
    }
    Ok(LaneDetections { lanes: out })
}

/// BEV decoding. `offsets: [L, H_b·W_b, 3]` holds column and row offsets in
/// cells and the height in meters; `scores: [L, 2 + N]`. Points come out
/// ordered by y, then x.
pub fn vote_bev(
    offsets: &Tensor,
    scores: &Tensor,
    layout: &BevLayout,
    params: &VoteParams,
) -> Result<LaneDetections> {
    let (rows, cols) = (layout.rows, layout.cols);
    let (sx, sy) = (
        (layout.x_range.1 - layout.x_range.0) / cols as f64,
        (layout.y_range.1 - layout.y_range.0) / rows as f64,
    );
    decode(
        offsets,
        scores,
        rows,
        cols,
        3,
        params,
        |map, j, k| {
            [
                k as f64 * sx + layout.x_range.0,
                j as f64 * sy + layout.y_range.0,
                map[(j * cols + k) * 3 + 2],
            ]
        },
        |p| (p[1], p[0]),
    )
}

/// Image-view decoding over an `(H_a, W_a)` map; points are `[u, v]` feature
/// pixels ordered by row, then column.
pub fn vote_iv(
    offsets: &Tensor,
    scores: &Tensor,
    image_hw: (usize, usize),
    params: &VoteParams,
) -> Result<LaneDetections<[f64; 2]>> {
    decode(offsets, scores, image_hw.0, image_hw.1, 2, params, |_, j, k| [k as f64, j as f64], |p| (p[1], p[0]))
}
