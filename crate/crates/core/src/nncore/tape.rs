//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node with at most two parents and
//! the local partial derivatives with respect to them. [`Tape::gradient`]
//! sweeps the nodes in reverse to accumulate adjoints. The batched network
//! code in [`super::mlp`] has hand-written backward passes for speed; the tape
//! is the general-purpose engine and the reference those passes are tested
//! against.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::NnError;

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({} = {})", self.index, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, parents: [usize; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { parents, partials });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let i = self.nodes.borrow().len();
        self.push([i, i], [0.0, 0.0], value)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints `d out / d node` for every node recorded so far.
    pub fn gradient(&self, out: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.index] = 1.0;
        for i in (0..=out.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for k in 0..2 {
                if n.parents[k] != i {
                    adj[n.parents[k]] += a * n.partials[k];
                }
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    fn unary(self, value: f64, partial: f64) -> Var<'t> {
        self.tape.push([self.index, self.index], [partial, 0.0], value)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        if self.index == other.index {
            return self.unary(value, da + db);
        }
        self.tape.push([self.index, other.index], [da, db], value)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let z = self.value;
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            z.exp() / (1.0 + z.exp())
        };
        self.unary(s, s * (1.0 - s))
    }

    pub fn softplus(self) -> Var<'t> {
        let z = self.value;
        let v = z.max(0.0) + (-z.abs()).exp().ln_1p();
        let s = 1.0 / (1.0 + (-z).exp());
        self.unary(v, s)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        self.unary(self.value.powi(n), n as f64 * self.value.powi(n - 1))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value + o.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value - o.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.value * o.value, o.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let q = self.value / o.value;
        self.binary(o, q, 1.0 / o.value, -q / o.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(self.value + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(self.value - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(self.value / c, 1.0 / c)
    }
}

/// Sum of a nonempty list of variables.
pub fn sum<'t>(xs: &[Var<'t>]) -> Var<'t> {
    let mut it = xs.iter().copied();
    let first = it.next().expect("sum of empty list");
    it.fold(first, |acc, x| acc + x)
}

/// Gradient of a scalar loss with respect to `params`. The closure receives
/// the tape and one leaf variable per parameter and returns the loss.
pub fn grad_params<F>(params: &[f64], loss: F) -> Result<(f64, Vec<f64>), NnError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let out = loss(&tape, &leaves);
    if !out.value().is_finite() {
        return Err(NnError::NonFiniteLoss {
            context: "grad_params".into(),
            value: out.value(),
        });
    }
    let adj = tape.gradient(out);
    Ok((out.value(), leaves.iter().map(|v| adj[v.index()]).collect()))
}
