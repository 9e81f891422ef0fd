//! Projection heads producing prototype distributions.
//!
//! A head is a 3-layer MLP, length normalization, and cosine logits against
//! `K` prototype rows. Students use a tempered log-softmax; teachers a
//! sharper softmax after subtracting a running center of their own logits.

use crate::params::{Bound, Init, ParamSet};
use crate::rng;
use crate::tensor::{kernels, Float, Result, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub d: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
    pub prefix: String,
}

impl Head {
    pub fn init<T: Float>(&self, seed: u64) -> ParamSet<T> {
        let mut r = rng::stream(&[0x4ead, seed]);
        let mut init = Init { rng: &mut r };
        let n = |s: &str| format!("{}{s}", self.prefix);
        let mut p = ParamSet::new();
        p.insert(n("w1"), init.linear(self.d, self.hidden));
        p.insert(n("b1"), init.zeros(vec![self.hidden]));
        p.insert(n("w2"), init.linear(self.hidden, self.hidden));
        p.insert(n("b2"), init.zeros(vec![self.hidden]));
        p.insert(n("w3"), init.linear(self.hidden, self.bottleneck));
        p.insert(n("b3"), init.zeros(vec![self.bottleneck]));
        p.insert(n("prototypes"), init.normal(vec![self.prototypes, self.bottleneck], 1.0));
        p
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        b.var(&format!("{}{name}", self.prefix))
    }

    /// Cosine prototype logits `[B × K]` for pooled features `[B × d]`.
    pub fn logits<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, pooled: Var) -> Result<Var> {
        let mut h = pooled;
        for (w, bias, act) in [("w1", "b1", true), ("w2", "b2", true), ("w3", "b3", false)] {
            h = tape.matmul(h, self.p(b, w))?;
            h = tape.add_bias(h, self.p(b, bias))?;
            if act {
                h = tape.gelu(h);
            }
        }
        let z = tape.l2_normalize(h);
        let protos = tape.l2_normalize(self.p(b, "prototypes"));
        tape.matmul_nt(z, protos)
    }
}

/// Teacher-side temperature and centering state for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Center<T> {
    pub value: Vec<T>,
    pub momentum: T,
}

impl<T: Float> Center<T> {
    pub fn new(k: usize, momentum: T) -> Self {
        Self { value: vec![T::zero(); k], momentum }
    }

    /// `softmax((logits − center) / t)` row-wise.
    pub fn teacher_probs(&self, logits: &[T], temperature: T) -> Vec<T> {
        let k = self.value.len();
        let mut out: Vec<T> = logits
            .iter()
            .enumerate()
            .map(|(i, &x)| x - self.value[i % k])
            .collect();
        kernels::softmax_rows(&mut out, k, T::one() / temperature);
        out
    }

    /// `c ← m·c + (1 − m)·mean_rows(logits)`.
    pub fn update(&mut self, logits: &[T]) {
        let k = self.value.len();
        let rows = logits.len() / k;
        if rows == 0 {
            return;
        }
        let inv = T::one() / T::lit(rows as f64);
        let m = self.momentum;
        for j in 0..k {
            let mean = (0..rows).map(|r| logits[r * k + j]).sum::<T>() * inv;
            self.value[j] = m * self.value[j] + (T::one() - m) * mean;
        }
    }
}

/// Student distribution at temperature `t`, as probabilities.
pub fn student_probs<T: Float>(logits: &[T], k: usize, temperature: T) -> Vec<T> {
    let mut out = logits.to_vec();
    kernels::softmax_rows(&mut out, k, T::one() / temperature);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_symmetric_logits_give_uniform_teacher() {
        let logits = [0.3, -0.3, -0.3, 0.3];
        let mut c = Center::new(2, 0.0);
        c.update(&logits);
        assert_eq!(c.value, vec![0.0, 0.0]);
        let mut c = Center { value: vec![0.3f64, -0.3], momentum: 0.9 };
        let p = c.teacher_probs(&[0.3, -0.3], 0.04);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        c.update(&[1.0, 1.0]);
        assert!((c.value[0] - (0.27 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let c = Center::new(3, 0.9);
        let p = c.teacher_probs(&[0.2, 0.9, 0.5], 1e-3);
        assert!(p[1] > 1.0 - 1e-12);
    }
}
