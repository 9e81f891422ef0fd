//! The four self-supervised objectives and their weighted sum.

use rand::seq::index;

use crate::rng;
use crate::tensor::{Float, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub feature: f64,
    pub masking: f64,
    pub koleo: f64,
    pub alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { feature: 1.0, masking: 1.0, koleo: 3.0, alignment: 2.0 }
    }
}

/// `−(1/P) Σ_p Σ_j a[p, j] · log b[p, j]`, where `teacher` holds the target
/// rows `a` (no gradient) and `student_logp` the matching rows of `log b`.
pub fn cross_entropy_rows<T: Float>(tape: &mut Tape<T>, teacher: &[T], student_logp: Var) -> Result<Var> {
    if teacher.len() != tape.value(student_logp).len() {
        return Err(TensorError::Shape {
            op: "cross_entropy_rows",
            lhs: vec![teacher.len()],
            rhs: tape.shape(student_logp).to_vec(),
        });
    }
    if !teacher.iter().all(|&p| p >= T::zero() && p.is_finite()) {
        return Err(TensorError::NonFinite("cross_entropy_rows teacher targets".into()));
    }
    let rows = tape.shape(student_logp)[0];
    let prod = tape.mul_const(student_logp, teacher)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -T::one() / T::lit(rows as f64)))
}

/// Feature-distribution loss over `(teacher row, student row)` pairs.
/// `teacher` is `[R × K]` probabilities; `student_logp` is `[S × K]`.
pub fn feature_loss<T: Float>(
    tape: &mut Tape<T>,
    teacher: &[T],
    student_logp: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let k = *tape.shape(student_logp).last().unwrap_or(&1);
    if pairs.is_empty() {
        return Err(TensorError::Param { op: "feature_loss", msg: "no view pairs".into() });
    }
    let mut targets = Vec::with_capacity(pairs.len() * k);
    for &(t, _) in pairs {
        targets.extend_from_slice(&teacher[t * k..(t + 1) * k]);
    }
    let sel = tape.select_rows(student_logp, pairs.iter().map(|p| p.1).collect())?;
    cross_entropy_rows(tape, &targets, sel)
}

/// `⌊ratio·n⌋` distinct positions per item, as global row indices into a
/// `[items·n × d]` token matrix.
pub fn mask_positions(items: usize, n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio {ratio} outside [0, 1]");
    let count = ((ratio * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    let mut r = rng::stream(&[0x3a5c, seed]);
    let mut out = Vec::with_capacity(items * count);
    for item in 0..items {
        let mut picked: Vec<usize> = index::sample(&mut r, n, count).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|p| item * n + p));
    }
    out
}

/// Replaces the rows chosen by [`mask_positions`] with `embedding`.
pub fn mask_tokens<T: Float>(
    tape: &mut Tape<T>,
    tokens: Var,
    items: usize,
    ratio: f64,
    embedding: Var,
    seed: u64,
) -> Result<(Var, Vec<usize>)> {
    let n = tape.shape(tokens)[0] / items.max(1);
    let pos = mask_positions(items, n, ratio, seed);
    let out = tape.mask_rows(tokens, embedding, pos.clone())?;
    Ok((out, pos))
}

/// Nearest-neighbor entropy regularizer on length-normalized rows. Fewer
/// than two rows give 0 with a warning.
pub fn koleo_loss<T: Float>(tape: &mut Tape<T>, emb: Var, eps: T) -> Result<Var> {
    if tape.shape(emb)[0] < 2 {
        log::warn!("koleo loss needs at least two embeddings; returning 0");
        return tape.constant(vec![1], vec![T::zero()]);
    }
    let e = tape.l2_normalize(emb);
    tape.koleo(e, eps)
}

/// Symmetric contrastive loss between video rows and frame rows. Row `i`
/// of both comes from clip `y[i]`, so the target of row `i` is column `i`.
pub fn alignment_loss<T: Float>(tape: &mut Tape<T>, video: Var, frame: Var, y: &[usize], temperature: T) -> Result<Var> {
    let b = tape.shape(video)[0];
    if tape.shape(frame)[0] != b || y.len() != b {
        return Err(TensorError::Shape { op: "alignment_loss", lhs: tape.shape(video).to_vec(), rhs: tape.shape(frame).to_vec() });
    }
    let mut seen = y.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(TensorError::Param { op: "alignment_loss", msg: "duplicate clip ids in batch".into() });
    }
    if !(temperature > T::zero()) {
        return Err(TensorError::Param { op: "alignment_loss", msg: "temperature must be positive".into() });
    }
    let s = tape.matmul_nt(video, frame)?;
    let s = tape.scale(s, T::one() / temperature);
    let st = tape.transpose(s)?;
    let targets: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy(s, &targets)?;
    let cols = tape.cross_entropy(st, &targets)?;
    let half = T::lit(0.5);
    tape.weighted_sum(&[(rows, half), (cols, half)])
}

/// The four loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<V> {
    pub feature: V,
    pub masking: V,
    pub koleo: V,
    pub alignment: V,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("loss term {term} is not finite ({value})")]
pub struct NonFiniteLoss {
    pub term: &'static str,
    pub value: f64,
}

/// `λ1·Lf + λ2·Lm + λ3·Lr + λ4·La`; fails naming the first non-finite term.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    terms: LossTerms<Var>,
    w: &LossWeights,
) -> std::result::Result<Var, NonFiniteLoss> {
    let list = [
        ("feature", terms.feature, w.feature),
        ("masking", terms.masking, w.masking),
        ("koleo", terms.koleo, w.koleo),
        ("alignment", terms.alignment, w.alignment),
    ];
    for (term, v, _) in list {
        let value = tape.scalar_value(v).as_f64();
        if !value.is_finite() {
            return Err(NonFiniteLoss { term, value });
        }
    }
    let weighted: Vec<(Var, T)> = list.iter().map(|&(_, v, w)| (v, T::lit(w))).collect();
    Ok(tape.weighted_sum(&weighted).expect("scalar loss terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn leaf(tape: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(vec![rows, cols], data).unwrap().with_grad())
    }

    #[test]
    fn uniform_feature_loss_is_log_k() {
        let k = 16;
        let mut tape = Tape::new();
        let logp = leaf(&mut tape, 2, k, vec![-(k as f64).ln(); 2 * k]);
        let l = feature_loss(&mut tape, &vec![1.0 / k as f64; 2 * k], logp, &[(0, 0), (1, 1)]).unwrap();
        assert!((tape.scalar_value(l) - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_teacher_limit() {
        for eps in [1e-1, 1e-3, 1e-6] {
            let mut tape = Tape::new();
            let logp = leaf(&mut tape, 1, 2, vec![(1.0f64 - eps).ln(), eps.ln()]);
            let l = feature_loss(&mut tape, &[1.0, 0.0], logp, &[(0, 0)]).unwrap();
            assert!((tape.scalar_value(l) + (1.0 - eps).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_loss_matches_direct_sum() {
        let mut r = rng::stream(&[7]);
        let (k, s) = (5, 3);
        let mut teacher = vec![0.0; 2 * k];
        for row in teacher.chunks_mut(k) {
            let z: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0)).collect();
            let t: f64 = z.iter().sum();
            row.iter_mut().zip(&z).for_each(|(a, b)| *a = b / t);
        }
        let mut logp = vec![0.0; s * k];
        for row in logp.chunks_mut(k) {
            let z: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
            let t: f64 = z.iter().sum();
            row.iter_mut().zip(&z).for_each(|(a, b)| *a = (b / t).ln());
        }
        let pairs = [(0, 2), (1, 0), (0, 1)];
        let mut tape = Tape::new();
        let lp = leaf(&mut tape, s, k, logp.clone());
        let l = feature_loss(&mut tape, &teacher, lp, &pairs).unwrap();
        let mut direct = 0.0;
        for &(t, st) in &pairs {
            for j in 0..k {
                direct -= teacher[t * k + j] * logp[st * k + j];
            }
        }
        direct /= pairs.len() as f64;
        assert!((tape.scalar_value(l) - direct).abs() < 1e-12);
    }

    #[test]
    fn mask_counts() {
        assert!(mask_positions(3, 8, 0.0, 1).is_empty());
        assert_eq!(mask_positions(2, 8, 1.0, 1), (0..16).collect::<Vec<_>>());
        let p = mask_positions(1, 8, 0.5, 1);
        assert_eq!(p.len(), 4);
        assert_eq!(mask_positions(4, 8, 0.3, 9).len(), 8);
        assert_eq!(mask_positions(4, 8, 0.3, 9), mask_positions(4, 8, 0.3, 9));
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(vec![8, 2], vec![1.0; 16]).unwrap();
        let m = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let (y, pos) = mask_tokens(&mut tape, x, 1, 0.0, m, 3).unwrap();
        assert!(pos.is_empty());
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn koleo_values() {
        let mut tape = Tape::new();
        let e = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = koleo_loss(&mut tape, e, 1e-8).unwrap();
        assert!((tape.scalar_value(l) + 0.5 * 2f64.ln()).abs() < 1e-9);
        let d = leaf(&mut tape, 2, 2, vec![0.6, 0.8, 0.6, 0.8]);
        let l = koleo_loss(&mut tape, d, 1e-8).unwrap();
        assert_eq!(tape.scalar_value(l), -(1e-8f64).ln());
        let one = leaf(&mut tape, 1, 2, vec![1.0, 0.0]);
        let l = koleo_loss(&mut tape, one, 1e-8).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn alignment_values() {
        let mut tape = Tape::new();
        let v = leaf(&mut tape, 1, 2, vec![1.0, 0.0]);
        let f = leaf(&mut tape, 1, 2, vec![0.0, 1.0]);
        let l = alignment_loss(&mut tape, v, f, &[3], 0.2).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let v = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let f = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = alignment_loss(&mut tape, v, f, &[0, 1], 1.0).unwrap();
        assert!((tape.scalar_value(l) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        let swapped = leaf(&mut tape, 2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let l2 = alignment_loss(&mut tape, v, swapped, &[0, 1], 1.0).unwrap();
        assert!(tape.scalar_value(l2) > tape.scalar_value(l));

        assert!(alignment_loss(&mut tape, v, f, &[4, 4], 1.0).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::<f64>::new();
        let c = |t: &mut Tape<f64>, x: f64| t.constant(vec![1], vec![x]).unwrap();
        let terms = LossTerms { feature: c(&mut tape, 1.5), masking: c(&mut tape, 2.0), koleo: c(&mut tape, -0.5), alignment: c(&mut tape, 0.25) };
        let l = total_loss(&mut tape, terms, &LossWeights::default()).unwrap();
        assert!((tape.scalar_value(l) - (1.5 + 2.0 - 1.5 + 0.5)).abs() < 1e-12);
        let zero = LossWeights { feature: 0.0, masking: 0.0, koleo: 0.0, alignment: 0.0 };
        let z = total_loss(&mut tape, terms, &zero).unwrap();
        assert_eq!(tape.scalar_value(z), 0.0);
        let only_f = LossWeights { feature: 1.0, masking: 0.0, koleo: 0.0, alignment: 0.0 };
        let f = total_loss(&mut tape, terms, &only_f).unwrap();
        assert_eq!(tape.scalar_value(f), 1.5);
        let bad = LossTerms { koleo: c(&mut tape, f64::NAN), ..terms };
        assert_eq!(total_loss(&mut tape, bad, &only_f).unwrap_err().term, "koleo");
    }
}
