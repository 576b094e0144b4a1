//! Position observables `f(q)` and weighted sets of them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVectorView};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// A position-only observable with an analytic gradient.
#[derive(Debug, Clone)]
pub enum Observable {
    /// `l · q`
    Linear(Vec<f64>),
    /// `½ qᵀ U₀ q + l · q`
    Quadratic { u0: SymMatrix, l: Vec<f64> },
    /// `½ |q|²`
    NormSquared,
    /// `q_i`
    Coordinate(usize),
    /// `Σ_k a_k q^k` on a one-dimensional state; `coeffs[k] = a_k`.
    Polynomial1d(Vec<f64>),
    /// User supplied value and gradient.
    Custom {
        eval: fn(&[f64]) -> f64,
        grad: fn(&[f64], &mut [f64]),
    },
}

impl Observable {
    /// `q⁴` on the line.
    pub fn quartic() -> Self {
        Observable::Polynomial1d(vec![0.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// `Σ_i a_i q^{2i+1}`.
    pub fn odd_polynomial(a: &[f64]) -> Self {
        let mut c = vec![0.0; 2 * a.len()];
        for (i, &ai) in a.iter().enumerate() {
            c[2 * i + 1] = ai;
        }
        Observable::Polynomial1d(c)
    }

    /// Checks the observable can act on `R^n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |msg| Err(Error::Dimension(msg));
        match self {
            Observable::Linear(l) if l.len() != n => bad(format!("linear weights have length {}, state {n}", l.len())),
            Observable::Quadratic { u0, l } if u0.dim() != n || l.len() != n => {
                bad(format!("quadratic observable is {}-dimensional, state {n}", u0.dim()))
            }
            Observable::Coordinate(i) if *i >= n => bad(format!("coordinate {i} out of range for dimension {n}")),
            Observable::Polynomial1d(_) if n != 1 => bad(format!("1D polynomial used on dimension {n}")),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        match self {
            Observable::Linear(l) => dot(l, q),
            Observable::Quadratic { u0, l } => {
                let qv = DVectorView::from_slice(q, q.len());
                0.5 * qv.dot(&(u0.as_matrix() * qv)) + dot(l, q)
            }
            Observable::NormSquared => 0.5 * dot(q, q),
            Observable::Coordinate(i) => q[*i],
            Observable::Polynomial1d(c) => c.iter().rev().fold(0.0, |acc, &a| acc * q[0] + a),
            Observable::Custom { eval, .. } => eval(q),
        }
    }

    pub fn grad_into(&self, q: &[f64], out: &mut [f64]) {
        match self {
            Observable::Linear(l) => out.copy_from_slice(l),
            Observable::Quadratic { u0, l } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = l[i] + u0.as_matrix().row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Observable::NormSquared => out.copy_from_slice(q),
            Observable::Coordinate(i) => {
                out.fill(0.0);
                out[*i] = 1.0;
            }
            Observable::Polynomial1d(c) => {
                out[0] = c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, &a)| acc * q[0] + k as f64 * a);
            }
            Observable::Custom { grad, .. } => grad(q, out),
        }
    }

    pub fn grad(&self, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; q.len()];
        self.grad_into(q, &mut g);
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `∇f(q)ᵀ Dq` as a row vector.
pub fn grad_row(f: &Observable, q: &[f64], dq: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = q.len();
    if dq.nrows() != n {
        return Err(Error::Dimension(format!("tangent has {} rows, state has {n}", dq.nrows())));
    }
    f.validate(n)?;
    let g = f.grad(q);
    Ok(row_times(&g, dq))
}

/// `gᵀ A` for a column vector `g`.
pub(crate) fn row_times(g: &[f64], a: &DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols()).map(|j| dot(g, a.column(j).as_slice())).collect()
}

/// Weighted observables; the objective is `Σ_i w_i σ_i²`.
#[derive(Debug, Clone)]
pub struct ObservableSet {
    members: Vec<Observable>,
    weights: Vec<f64>,
}

impl ObservableSet {
    pub fn single(f: Observable) -> Self {
        Self { members: vec![f], weights: vec![1.0] }
    }

    pub fn new(members: Vec<Observable>) -> Self {
        let weights = vec![1.0; members.len()];
        Self { members, weights }
    }

    pub fn with_weights(members: Vec<Observable>, weights: Vec<f64>) -> Result<Self> {
        if members.len() != weights.len() {
            return Err(Error::Dimension(format!("{} observables but {} weights", members.len(), weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::Config(format!("observable weights must be nonnegative, got {w}")));
        }
        Ok(Self { members, weights })
    }

    /// `f_i(q) = q_i` for every coordinate.
    pub fn coordinates(n: usize) -> Self {
        Self::new((0..n).map(Observable::Coordinate).collect())
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("observable set is empty".into()));
        }
        self.members.iter().try_for_each(|f| f.validate(n))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Observable] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eval_into(&self, q: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.members) {
            *o = f.eval(q);
        }
    }
}
