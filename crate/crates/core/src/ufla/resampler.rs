//! Cross-attention resampler: `L` learned queries attend over any number of
//! input tokens and return exactly `L` tokens per item.

use crate::params::{Bound, Init, ParamSet};
use crate::rng;
use crate::tensor::{Float, Result, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub queries: usize,
    pub d: usize,
    pub heads: usize,
    pub prefix: String,
}

impl Resampler {
    pub fn new(queries: usize, d: usize, heads: usize, prefix: impl Into<String>) -> Self {
        Self { queries, d, heads, prefix: prefix.into() }
    }

    pub fn init<T: Float>(&self, seed: u64) -> ParamSet<T> {
        let mut r = rng::stream(&[0x4e5a, seed]);
        let mut init = Init { rng: &mut r };
        let d = self.d;
        let mut p = ParamSet::new();
        let n = |s: &str| format!("{}{s}", self.prefix);
        p.insert(n("queries"), init.normal(vec![self.queries, d], 1.0));
        p.insert(n("ln.gain"), init.ones(vec![d]));
        p.insert(n("ln.bias"), init.zeros(vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(n(w), init.linear(d, d));
        }
        for b in ["bv", "bo"] {
            p.insert(n(b), init.zeros(vec![d]));
        }
        p
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        b.var(&format!("{}{name}", self.prefix))
    }

    /// `[items·n × d]` tokens to `[items·L × d]`. No positional signal is
    /// used, so the output does not depend on token order within an item.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var, items: usize) -> Result<Var> {
        let rows = tape.shape(tokens)[0];
        let n = rows / items.max(1);
        let h = tape.layer_norm(tokens, self.p(b, "ln.gain"), self.p(b, "ln.bias"), T::lit(LN_EPS))?;
        let k = tape.matmul(h, self.p(b, "wk"))?;
        let v = tape.matmul(h, self.p(b, "wv"))?;
        let v = tape.add_bias(v, self.p(b, "bv"))?;
        let q = tape.matmul(self.p(b, "queries"), self.p(b, "wq"))?;
        let l = self.queries;
        let q = tape.select_rows(q, (0..items * l).map(|r| r % l).collect())?;
        let a = tape.attention(q, k, v, self.heads, l, n)?;
        let o = tape.matmul(a, self.p(b, "wo"))?;
        tape.add_bias(o, self.p(b, "bo"))
    }
}
