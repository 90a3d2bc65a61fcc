//! Serialized multi-speaker targets and the three ordering strategies.
//!
//! A serialized label for components ordered by `order` is
//! `L[order[0]] <sc> L[order[1]] <sc> ... L[order[N-1]] <sc> <eos>`: every
//! component, including the last, is followed by `<sc>`.

use serde::{Deserialize, Serialize};

use crate::config::Strategy;
use crate::ctc::{ctc_loss, dominance_scores, LogitGrid};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{log_softmax_into, Scalar};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Default cap on the number of speakers for exhaustive permutation search.
pub const DEFAULT_MAX_PIT_SPEAKERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedLabel {
    pub tokens: TokenSequence,
    /// Component index placed at each position.
    pub order: Vec<usize>,
    pub strategy: Option<Strategy>,
}

impl SerializedLabel {
    pub fn ids(&self) -> &[TokenId] {
        self.tokens.ids()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Component transcripts in serialized order.
    pub fn segments(&self, vocab: &Vocabulary) -> Vec<TokenSequence> {
        let mut parts = self.tokens.without(vocab.eos_id()).split_on(vocab.sc_id());
        if parts.last().is_some_and(TokenSequence::is_empty) {
            parts.pop();
        }
        parts
    }
}

pub fn is_permutation(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n)
            .rev()
            .find(|&j| current[j] > current[i - 1])
            .expect("pivot has a successor");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

pub fn build_serialized_label(
    transcripts: &[TokenSequence],
    order: &[usize],
    vocab: &Vocabulary,
) -> Result<SerializedLabel> {
    if transcripts.is_empty() || !is_permutation(order, transcripts.len()) {
        return Err(Error::InvalidPermutation(order.to_vec()));
    }
    let mut ids = Vec::with_capacity(transcripts.iter().map(TokenSequence::len).sum::<usize>() + order.len() + 1);
    for &i in order {
        vocab.check_content(&transcripts[i])?;
        ids.extend_from_slice(transcripts[i].ids());
        ids.push(vocab.sc_id());
    }
    ids.push(vocab.eos_id());
    Ok(SerializedLabel {
        tokens: TokenSequence::new(ids),
        order: order.to_vec(),
        strategy: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeResult<T> {
    pub loss: T,
    pub grad: Option<Matrix<T>>,
}

/// Teacher-forced cross entropy summed over target positions. Row `n` of
/// `logits` scores decoder output columns for target token `n`; pad positions
/// contribute nothing.
pub fn ce_loss<T: Scalar>(
    logits: &Matrix<T>,
    target: &[TokenId],
    vocab: &Vocabulary,
    with_grad: bool,
) -> Result<CeResult<T>> {
    if logits.rows() != target.len() || logits.cols() != vocab.output_size() {
        return Err(Error::Shape(format!(
            "decoder logits {}x{} against target length {} and {} output classes",
            logits.rows(),
            logits.cols(),
            target.len(),
            vocab.output_size()
        )));
    }
    let mut loss = T::zero();
    let mut grad = with_grad.then(|| Matrix::zeros(logits.rows(), logits.cols()));
    let mut lp = vec![T::zero(); logits.cols()];
    for (n, &tok) in target.iter().enumerate() {
        if tok == vocab.pad_id() {
            continue;
        }
        let col = vocab.to_output(tok).ok_or(Error::NotContent(tok))?;
        log_softmax_into(logits.row(n), &mut lp);
        loss -= lp[col];
        if let Some(g) = grad.as_mut() {
            let row = g.row_mut(n);
            for (r, &l) in row.iter_mut().zip(&lp) {
                *r = l.exp();
            }
            row[col] -= T::one();
        }
    }
    Ok(CeResult { loss, grad })
}

/// Ascending start frame, ties by component index.
pub fn fifo_order(start_frames: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..start_frames.len()).collect();
    order.sort_by_key(|&i| (start_frames[i], i));
    order
}

/// Ascending dominance score, ties by component index, unscorable components last.
pub fn dom_order<T: Scalar>(scores: &[Option<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match (scores[a], scores[b]) {
        (Some(x), Some(y)) => x.partial_cmp(&y).expect("finite dominance scores").then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationSearchResult<T> {
    pub best_loss: T,
    pub best_permutation: Vec<usize>,
    /// Every permutation with its loss, lexicographic order.
    pub all_losses: Vec<(Vec<usize>, T)>,
    /// Gradient of `best_loss` with respect to the winning decoder logits.
    pub best_grad: Option<Matrix<T>>,
}

/// Exhaustive minimum-CE search over speaker orders. `decoder_logits` runs the
/// teacher-forced decoder on a candidate label. Ties keep the earliest
/// permutation in lexicographic order.
pub fn pit_best_permutation<T, F>(
    mut decoder_logits: F,
    transcripts: &[TokenSequence],
    vocab: &Vocabulary,
    max_speakers: usize,
    with_grad: bool,
) -> Result<PermutationSearchResult<T>>
where
    T: Scalar,
    F: FnMut(&SerializedLabel) -> Result<Matrix<T>>,
{
    let n = transcripts.len();
    if n > max_speakers {
        return Err(Error::TooManySpeakers {
            got: n,
            max: max_speakers,
        });
    }
    let mut all_losses: Vec<(Vec<usize>, T)> = Vec::new();
    let mut best: Option<(usize, Matrix<T>)> = None;
    for perm in permutations(n) {
        let mut label = build_serialized_label(transcripts, &perm, vocab)?;
        label.strategy = Some(Strategy::Pit);
        let logits = decoder_logits(&label)?;
        let loss = ce_loss(&logits, label.ids(), vocab, false)?.loss;
        let improves = match &best {
            None => true,
            Some((idx, _)) => loss < all_losses[*idx].1,
        };
        if improves {
            best = Some((all_losses.len(), logits));
        }
        all_losses.push((perm, loss));
    }
    let (idx, logits) = best.ok_or(Error::InvalidPermutation(Vec::new()))?;
    let (best_permutation, best_loss) = all_losses[idx].clone();
    let best_grad = if with_grad {
        let label = build_serialized_label(transcripts, &best_permutation, vocab)?;
        ce_loss(&logits, label.ids(), vocab, true)?.grad
    } else {
        None
    };
    Ok(PermutationSearchResult {
        best_loss,
        best_permutation,
        all_losses,
        best_grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomLoss<T> {
    /// `alpha * ctc_min + (1 - alpha) * ce`.
    pub loss: T,
    pub ctc_min: T,
    pub ce: T,
    /// Dominance score per component, `None` when the label cannot be aligned.
    pub scores: Vec<Option<T>>,
    pub label: SerializedLabel,
    /// Component whose CTC loss is the minimum; always `label.order[0]`.
    pub argmin: usize,
    /// Gradient with respect to the encoder grid (only through `argmin`).
    pub grid_grad: Option<Matrix<T>>,
    pub logits_grad: Option<Matrix<T>>,
}

/// Dominance loss: minimum CTC over components plus CE on the label ordered
/// by ascending CTC. The ordering itself is a constant for differentiation.
pub fn dom_loss<T, F>(
    encoder_grid: &LogitGrid<T>,
    mut decoder_logits: F,
    transcripts: &[TokenSequence],
    alpha: T,
    vocab: &Vocabulary,
    with_grad: bool,
) -> Result<DomLoss<T>>
where
    T: Scalar,
    F: FnMut(&SerializedLabel) -> Result<Matrix<T>>,
{
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Config("alpha must lie in [0, 1]".into()));
    }
    let labels: Vec<&[TokenId]> = transcripts.iter().map(TokenSequence::ids).collect();
    let scores = dominance_scores(encoder_grid, &labels)?;
    if scores.iter().all(Option::is_none) {
        return Err(Error::AllInfeasible);
    }
    let order = dom_order(&scores);
    let argmin = order[0];
    let mut label = build_serialized_label(transcripts, &order, vocab)?;
    label.strategy = Some(Strategy::Dom);

    let logits = decoder_logits(&label)?;
    let ce = ce_loss(&logits, label.ids(), vocab, with_grad)?;
    let ctc = ctc_loss(encoder_grid, labels[argmin], with_grad)?;
    let one_minus = T::one() - alpha;
    let loss = alpha * ctc.loss + one_minus * ce.loss;
    Ok(DomLoss {
        loss,
        ctc_min: ctc.loss,
        ce: ce.loss,
        scores,
        label,
        argmin,
        grid_grad: ctc.grad.map(|g| g.scale(alpha)),
        logits_grad: ce.grad.map(|g| g.scale(one_minus)),
    })
}
