//! Connectionist temporal classification loss in the log domain.
//!
//! A grid row holds unnormalized scores for every CTC class; the blank class is
//! always the last column. Posteriors are the row-wise softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{log_add, log_softmax_into, Scalar};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSource {
    EncoderHead,
    Decoder,
}

/// Time-by-class score matrix. Entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid<T> {
    scores: Matrix<T>,
    source: GridSource,
}

impl<T: Scalar> LogitGrid<T> {
    pub fn new(scores: Matrix<T>, source: GridSource) -> Result<Self> {
        if !scores.is_finite() {
            return Err(Error::Shape("logit grid contains non-finite entries".into()));
        }
        if scores.cols() < 2 {
            return Err(Error::Shape("logit grid needs at least one class besides blank".into()));
        }
        Ok(LogitGrid { scores, source })
    }

    pub fn encoder(scores: Matrix<T>) -> Result<Self> {
        Self::new(scores, GridSource::EncoderHead)
    }

    pub fn scores(&self) -> &Matrix<T> {
        &self.scores
    }

    pub fn source(&self) -> GridSource {
        self.source
    }

    pub fn frames(&self) -> usize {
        self.scores.rows()
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn blank(&self) -> usize {
        self.scores.cols() - 1
    }

    fn log_probs(&self) -> Matrix<T> {
        let mut lp = Matrix::zeros(self.frames(), self.classes());
        for t in 0..self.frames() {
            log_softmax_into(self.scores.row(t), lp.row_mut(t));
        }
        lp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcResult<T> {
    /// Negative natural-log likelihood.
    pub loss: T,
    /// Derivative of `loss` with respect to the grid scores.
    pub grad: Option<Matrix<T>>,
}

/// Fewest frames that can carry `label`: one per token plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(label: &[TokenId]) -> usize {
    label.len() + repeats(label)
}

fn repeats(label: &[TokenId]) -> usize {
    label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label<T: Scalar>(grid: &LogitGrid<T>, label: &[TokenId]) -> Result<()> {
    if let Some(&bad) = label.iter().find(|&&k| k >= grid.blank()) {
        return Err(Error::NotContent(bad));
    }
    if grid.frames() < min_frames(label) {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: repeats(label),
            frames: grid.frames(),
        });
    }
    Ok(())
}

/// CTC negative log likelihood of `label` under `grid`, with the gradient with
/// respect to the raw scores when `with_grad` is set.
pub fn ctc_loss<T: Scalar>(grid: &LogitGrid<T>, label: &[TokenId], with_grad: bool) -> Result<CtcResult<T>> {
    check_label(grid, label)?;
    let lp = grid.log_probs();
    let frames = grid.frames();
    let blank = grid.blank();
    let ninf = T::neg_infinity();

    // Blank-augmented label: b l1 b l2 ... lL b
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(label.iter().flat_map(|&k| [k, blank]))
        .collect();
    let states = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = Matrix::filled(frames, states, ninf);
    alpha.set(0, 0, lp.get(0, blank));
    if states > 1 {
        alpha.set(0, 1, lp.get(0, ext[1]));
    }
    for t in 1..frames {
        for (s, &sym) in ext.iter().enumerate() {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if can_skip(s) {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc != ninf {
                alpha.set(t, s, acc + lp.get(t, sym));
            }
        }
    }
    let mut log_likelihood = alpha.get(frames - 1, states - 1);
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha.get(frames - 1, states - 2));
    }
    if log_likelihood == ninf {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: repeats(label),
            frames,
        });
    }
    let loss = -log_likelihood;
    if !with_grad {
        return Ok(CtcResult { loss, grad: None });
    }

    // beta(t, s): log probability of finishing from state s at frame t, not
    // counting the emission at t.
    let mut beta = Matrix::filled(frames, states, ninf);
    beta.set(frames - 1, states - 1, T::zero());
    if states > 1 {
        beta.set(frames - 1, states - 2, T::zero());
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta.get(t + 1, s) + lp.get(t + 1, ext[s]);
            if s + 1 < states {
                acc = log_add(acc, beta.get(t + 1, s + 1) + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta.get(t + 1, s + 2) + lp.get(t + 1, ext[s + 2]));
            }
            beta.set(t, s, acc);
        }
    }

    let classes = grid.classes();
    let mut grad = Matrix::zeros(frames, classes);
    let mut occupancy = vec![ninf; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..states {
            let a = alpha.get(t, s);
            let b = beta.get(t, s);
            if a != ninf && b != ninf {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], a + b);
            }
        }
        let row = grad.row_mut(t);
        for k in 0..classes {
            let posterior = lp.get(t, k).exp();
            let target = if occupancy[k] == ninf {
                T::zero()
            } else {
                (occupancy[k] - log_likelihood).exp()
            };
            row[k] = posterior - target;
        }
    }
    Ok(CtcResult { loss, grad: Some(grad) })
}

/// Upper bound on enumerated paths for [`ctc_bruteforce`].
pub const BRUTEFORCE_MAX_PATHS: usize = 2_000_000;

/// Exhaustive CTC: sums the probability of every frame-level path that
/// collapses to `label`. Only for tiny grids (`T' <= 8`, `|label| <= 4`).
pub fn ctc_bruteforce<T: Scalar>(grid: &LogitGrid<T>, label: &[TokenId]) -> Result<T> {
    let frames = grid.frames();
    let classes = grid.classes();
    if frames > 8 || label.len() > 4 {
        return Err(Error::BruteForceLimit(format!("T'={frames}, |label|={}", label.len())));
    }
    let paths = (classes as u128).pow(frames as u32);
    if paths > BRUTEFORCE_MAX_PATHS as u128 {
        return Err(Error::BruteForceLimit(format!("{paths} paths")));
    }
    check_label(grid, label)?;
    let lp = grid.log_probs();
    let blank = grid.blank();

    let mut path = vec![0usize; frames];
    let mut collapsed = Vec::with_capacity(frames);
    let mut total = T::neg_infinity();
    'outer: loop {
        collapsed.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == label {
            let logp: T = path.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum();
            total = log_add(total, logp);
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < classes {
                continue 'outer;
            }
            *slot = 0;
        }
        break;
    }
    if total == T::neg_infinity() {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: repeats(label),
            frames,
        });
    }
    Ok(-total)
}

/// CTC loss of each candidate transcript against one shared encoder grid.
/// Lower means more dominant; `None` marks a label that cannot be aligned.
pub fn dominance_scores<T: Scalar>(grid: &LogitGrid<T>, labels: &[&[TokenId]]) -> Result<Vec<Option<T>>> {
    labels
        .iter()
        .map(|label| match ctc_loss(grid, label, false) {
            Ok(r) => Ok(Some(r.loss)),
            Err(Error::InfeasibleLabel { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}
