//! Forward-mode tangents carried alongside tape values.
//!
//! A [`Dual`] pairs a value node with the node holding its derivative with
//! respect to one scalar input (the prediction time). Both live on the same
//! tape, so a loss built from tangents can itself be differentiated in
//! reverse mode. A missing tangent means "identically zero".

use ndarray::Array2;

use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dual {
    pub v: Var,
    pub t: Option<Var>,
}

impl Dual {
    pub fn constant(v: Var) -> Self {
        Self { v, t: None }
    }
}

impl Tape {
    pub fn d_const(&mut self, value: Array2<f64>) -> Dual {
        Dual::constant(self.constant(value))
    }

    /// Tangent node, materialising zeros when absent.
    pub fn tangent_or_zero(&mut self, a: Dual) -> Var {
        match a.t {
            Some(t) => t,
            None => {
                let z = Array2::zeros(self.value(a.v).raw_dim());
                self.constant(z)
            }
        }
    }

    fn t_add(&mut self, a: Option<Var>, b: Option<Var>) -> Option<Var> {
        match (a, b) {
            (Some(x), Some(y)) => Some(self.add(x, y)),
            (x, None) => x,
            (None, y) => y,
        }
    }

    pub fn d_add(&mut self, a: Dual, b: Dual) -> Dual {
        let v = self.add(a.v, b.v);
        let t = self.t_add(a.t, b.t);
        Dual { v, t }
    }

    pub fn d_sub(&mut self, a: Dual, b: Dual) -> Dual {
        let v = self.sub(a.v, b.v);
        let t = match (a.t, b.t) {
            (Some(x), Some(y)) => Some(self.sub(x, y)),
            (x, None) => x,
            (None, Some(y)) => Some(self.neg(y)),
        };
        Dual { v, t }
    }

    pub fn d_mul(&mut self, a: Dual, b: Dual) -> Dual {
        let v = self.mul(a.v, b.v);
        let ta = a.t.map(|t| self.mul(t, b.v));
        let tb = b.t.map(|t| self.mul(a.v, t));
        let t = self.t_add(ta, tb);
        Dual { v, t }
    }

    pub fn d_div(&mut self, a: Dual, b: Dual) -> Dual {
        let v = self.div(a.v, b.v);
        // (a/b)' = (a' - v b') / b
        let num = match (a.t, b.t) {
            (ta, Some(tb)) => {
                let vtb = self.mul(v, tb);
                Some(match ta {
                    Some(ta) => self.sub(ta, vtb),
                    None => self.neg(vtb),
                })
            }
            (ta, None) => ta,
        };
        let t = num.map(|n| self.div(n, b.v));
        Dual { v, t }
    }

    pub fn d_neg(&mut self, a: Dual) -> Dual {
        let v = self.neg(a.v);
        let t = a.t.map(|t| self.neg(t));
        Dual { v, t }
    }

    pub fn d_scale(&mut self, a: Dual, k: f64) -> Dual {
        let v = self.scale(a.v, k);
        let t = a.t.map(|t| self.scale(t, k));
        Dual { v, t }
    }

    pub fn d_offset(&mut self, a: Dual, k: f64) -> Dual {
        Dual { v: self.offset(a.v, k), t: a.t }
    }

    /// `a · W` where `W` does not depend on the tangent direction.
    pub fn d_matmul(&mut self, a: Dual, w: Var) -> Dual {
        let v = self.matmul(a.v, w);
        let t = a.t.map(|t| self.matmul(t, w));
        Dual { v, t }
    }

    pub fn d_sigmoid(&mut self, a: Dual) -> Dual {
        let v = self.sigmoid(a.v);
        let t = a.t.map(|t| {
            let one_minus = self.neg(v);
            let one_minus = self.offset(one_minus, 1.0);
            let ds = self.mul(v, one_minus);
            self.mul(ds, t)
        });
        Dual { v, t }
    }

    pub fn d_clamp_columns(&mut self, a: Dual, lo: &[f64], hi: &[f64]) -> Dual {
        let v = self.clamp_columns(a.v, lo, hi);
        let t = a.t.map(|t| {
            let mask = self.clamp_mask(v).expect("clamp node").clone();
            let mask = self.constant(mask);
            self.mul(t, mask)
        });
        Dual { v, t }
    }

    pub fn d_tanh(&mut self, a: Dual) -> Dual {
        let v = self.tanh(a.v);
        let t = a.t.map(|t| {
            let sq = self.square(v);
            let neg = self.neg(sq);
            let d = self.offset(neg, 1.0);
            self.mul(d, t)
        });
        Dual { v, t }
    }

    pub fn d_sin(&mut self, a: Dual) -> Dual {
        let v = self.sin(a.v);
        let t = a.t.map(|t| {
            let c = self.cos(a.v);
            self.mul(c, t)
        });
        Dual { v, t }
    }

    pub fn d_cos(&mut self, a: Dual) -> Dual {
        let v = self.cos(a.v);
        let t = a.t.map(|t| {
            let s = self.sin(a.v);
            let ns = self.neg(s);
            self.mul(ns, t)
        });
        Dual { v, t }
    }

    pub fn d_atan(&mut self, a: Dual) -> Dual {
        let v = self.atan(a.v);
        let t = a.t.map(|t| {
            let sq = self.square(a.v);
            let den = self.offset(sq, 1.0);
            self.div(t, den)
        });
        Dual { v, t }
    }

    pub fn d_square(&mut self, a: Dual) -> Dual {
        let v = self.square(a.v);
        let t = a.t.map(|t| {
            let m = self.mul(a.v, t);
            self.scale(m, 2.0)
        });
        Dual { v, t }
    }

    pub fn d_columns(&mut self, a: Dual, start: usize, len: usize) -> Dual {
        let v = self.columns(a.v, start, len);
        let t = a.t.map(|t| self.columns(t, start, len));
        Dual { v, t }
    }

    pub fn d_rows(&mut self, a: Dual, start: usize, len: usize) -> Dual {
        let v = self.rows(a.v, start, len);
        let t = a.t.map(|t| self.rows(t, start, len));
        Dual { v, t }
    }

    pub fn d_column(&mut self, a: Dual, j: usize) -> Dual {
        self.d_columns(a, j, 1)
    }

    pub fn d_hcat(&mut self, parts: &[Dual]) -> Dual {
        let vs: Vec<Var> = parts.iter().map(|p| p.v).collect();
        let v = self.hcat(&vs);
        let t = if parts.iter().any(|p| p.t.is_some()) {
            let ts: Vec<Var> = parts.iter().map(|&p| self.tangent_or_zero(p)).collect();
            Some(self.hcat(&ts))
        } else {
            None
        };
        Dual { v, t }
    }
}
