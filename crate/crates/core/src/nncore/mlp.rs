//! Batched dense networks with an optional forward-mode input tangent.
//!
//! A pass can carry, next to the activations `H`, a tangent `Ḣ = dH/ds` along
//! one input direction `s`. The backward pass accepts cotangents for both the
//! output and the output tangent, which gives exact parameter gradients of
//! losses built from input derivatives (force matching) at the cost of a
//! second set of matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::params::LayoutBuilder;
use super::tape::{Tape, Var};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    /// When false the activation is also applied to the output layer.
    pub linear_output: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(NnError::Spec(format!("all widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

#[derive(Debug, Clone)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    act: Option<Activation>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    inputs: Vec<Array2<f64>>,
    input_tangents: Option<Vec<Array2<f64>>>,
    /// σ'(Z) per layer (ones for a linear layer).
    d1: Vec<Option<Array2<f64>>>,
    /// σ''(Z) ⊙ Ż per layer, only with tangents.
    d2z: Vec<Option<Array2<f64>>>,
    pub output: Array2<f64>,
    pub output_tangent: Option<Array2<f64>>,
}

impl Mlp {
    /// Registers `prefix.{l}.weight` / `prefix.{l}.bias` segments.
    pub fn new(spec: MlpSpec, layout: &mut LayoutBuilder, prefix: &str) -> Result<Self, NnError> {
        spec.validate()?;
        let widths = spec.widths();
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let w = layout.push(format!("{prefix}.{l}.weight"), &[fan_in, fan_out]);
                let b = layout.push(format!("{prefix}.{l}.bias"), &[fan_out]);
                let act = if l + 1 < n || !spec.linear_output {
                    Some(spec.activation)
                } else {
                    None
                };
                Layer {
                    fan_in,
                    fan_out,
                    w,
                    b,
                    act,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        let first = self.layers.first().map(|l| l.w).unwrap_or(0);
        let last = self.layers.last().map(|l| l.b + l.fan_out).unwrap_or(0);
        first..last
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in &self.layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut params[l.w..l.w + l.fan_in * l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            for v in &mut params[l.b..l.b + l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }

    /// Output-layer bias slice (gauge direction for scalar energies).
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let l = self.layers.last().expect("at least one layer");
        l.b..l.b + l.fan_out
    }

    fn weight<'a>(&self, params: &'a [f64], l: &Layer) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.fan_in, l.fan_out), &params[l.w..l.w + l.fan_in * l.fan_out])
            .expect("weight slice shape")
    }

    fn bias<'a>(&self, params: &'a [f64], l: &Layer) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[l.b..l.b + l.fan_out])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.spec.input {
            return Err(NnError::ShapeMismatch {
                expected: self.spec.input,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Plain forward pass (no cache).
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&self.weight(params, l));
            z += &self.bias(params, l);
            if let Some(act) = l.act {
                z.mapv_inplace(|v| act.value(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass recording what the backward pass needs; `tangent` is the
    /// input tangent `dX/ds`, if any.
    pub fn forward_pass(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        tangent: Option<ArrayView2<f64>>,
    ) -> Result<Pass, NnError> {
        self.check_input(&x)?;
        if let Some(t) = &tangent {
            if t.dim() != x.dim() {
                return Err(NnError::ShapeMismatch {
                    expected: x.ncols(),
                    found: t.ncols(),
                });
            }
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut input_tangents = tangent.as_ref().map(|_| Vec::with_capacity(n));
        let mut d1 = Vec::with_capacity(n);
        let mut d2z = Vec::with_capacity(n);
        let mut h = x.to_owned();
        let mut hdot = tangent.map(|t| t.to_owned());
        for l in &self.layers {
            let w = self.weight(params, l);
            let mut z = h.dot(&w);
            z += &self.bias(params, l);
            let mut zdot = hdot.as_ref().map(|t| t.dot(&w));
            match l.act {
                Some(act) => {
                    let mut g1 = Array2::zeros(z.dim());
                    let mut g2z = zdot.as_ref().map(|_| Array2::zeros(z.dim()));
                    match (&mut zdot, &mut g2z) {
                        (Some(zd), Some(g2z)) => {
                            Zip::from(&mut z)
                                .and(zd)
                                .and(&mut g1)
                                .and(g2z)
                                .for_each(|z, zd, g1, g2z| {
                                    let (v, a1, a2) = act.eval(*z);
                                    *g2z = a2 * *zd;
                                    *zd *= a1;
                                    *g1 = a1;
                                    *z = v;
                                });
                        }
                        _ => {
                            Zip::from(&mut z).and(&mut g1).for_each(|z, g1| {
                                let (v, a1, _) = act.eval(*z);
                                *g1 = a1;
                                *z = v;
                            });
                        }
                    }
                    d1.push(Some(g1));
                    d2z.push(g2z);
                }
                None => {
                    d1.push(None);
                    d2z.push(None);
                }
            }
            inputs.push(std::mem::replace(&mut h, z));
            if let (Some(list), Some(prev)) = (&mut input_tangents, hdot.take()) {
                list.push(prev);
            }
            hdot = zdot;
        }
        Ok(Pass {
            inputs,
            input_tangents,
            d1,
            d2z,
            output: h,
            output_tangent: hdot,
        })
    }

    /// Accumulates parameter gradients into `grad` (which spans the whole
    /// parameter vector) and returns the cotangents of the input and of the
    /// input tangent.
    pub fn backward(
        &self,
        params: &[f64],
        pass: &Pass,
        g_out: ArrayView2<f64>,
        g_out_tangent: Option<ArrayView2<f64>>,
        grad: &mut [f64],
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut gh = g_out.to_owned();
        let mut ghdot = match (&pass.input_tangents, g_out_tangent) {
            (Some(_), Some(g)) => Some(g.to_owned()),
            _ => None,
        };
        for (i, l) in self.layers.iter().enumerate().rev() {
            // Cotangents of the pre-activations.
            let (gz, gzdot) = match &pass.d1[i] {
                Some(d1) => {
                    let mut gz = &gh * d1;
                    let gzdot = ghdot.as_ref().map(|gd| {
                        if let Some(d2z) = &pass.d2z[i] {
                            Zip::from(&mut gz)
                                .and(gd)
                                .and(d2z)
                                .for_each(|gz, gd, d2z| *gz += gd * d2z);
                        }
                        gd * d1
                    });
                    (gz, gzdot)
                }
                None => (gh, ghdot),
            };
            let w = self.weight(params, l);
            {
                let (head, tail) = grad.split_at_mut(l.b);
                let mut gw =
                    ArrayViewMut2::from_shape((l.fan_in, l.fan_out), &mut head[l.w..l.w + l.fan_in * l.fan_out])
                        .expect("grad weight shape");
                general_mat_mul(1.0, &pass.inputs[i].t(), &gz, 1.0, &mut gw);
                if let (Some(gzd), Some(ht)) = (&gzdot, &pass.input_tangents) {
                    general_mat_mul(1.0, &ht[i].t(), gzd, 1.0, &mut gw);
                }
                let mut gb = ArrayViewMut1::from(&mut tail[..l.fan_out]);
                gb += &gz.sum_axis(Axis(0));
            }
            gh = gz.dot(&w.t());
            ghdot = gzdot.map(|g| g.dot(&w.t()));
        }
        (gh, ghdot)
    }

    /// Same network evaluated on the tape, for one sample.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: &[Var<'t>]) -> Vec<Var<'t>> {
        self.forward_tangent_tape(tape, params, x, None).0
    }

    /// Tape evaluation carrying a tangent along `xdot`.
    pub fn forward_tangent_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: &[Var<'t>],
        xdot: Option<&[Var<'t>]>,
    ) -> (Vec<Var<'t>>, Option<Vec<Var<'t>>>) {
        let _ = tape;
        let mut h: Vec<Var<'t>> = x.to_vec();
        let mut hdot: Option<Vec<Var<'t>>> = xdot.map(|d| d.to_vec());
        for l in &self.layers {
            let mut z = Vec::with_capacity(l.fan_out);
            let mut zdot = Vec::with_capacity(l.fan_out);
            for j in 0..l.fan_out {
                let mut acc = params[l.b + j];
                for (i, hi) in h.iter().enumerate() {
                    acc = acc + *hi * params[l.w + i * l.fan_out + j];
                }
                z.push(acc);
                if let Some(hd) = &hdot {
                    let terms: Vec<Var<'t>> = hd
                        .iter()
                        .enumerate()
                        .map(|(i, hdi)| *hdi * params[l.w + i * l.fan_out + j])
                        .collect();
                    zdot.push(super::tape::sum(&terms));
                }
            }
            match l.act {
                Some(act) => {
                    if hdot.is_some() {
                        zdot = z
                            .iter()
                            .zip(&zdot)
                            .map(|(zi, zd)| act.deriv_var(*zi) * *zd)
                            .collect();
                    }
                    h = z.into_iter().map(|zi| act.var(zi)).collect();
                }
                None => h = z,
            }
            if hdot.is_some() {
                hdot = Some(zdot);
            }
        }
        (h, hdot)
    }

    /// `d output_k / d input` for a single input row (one tangent per input
    /// dimension). Returns a row-major `output × input` Jacobian.
    pub fn grad_input(&self, params: &[f64], x: &[f64]) -> Result<Array2<f64>, NnError> {
        let n_in = self.spec.input;
        if x.len() != n_in {
            return Err(NnError::ShapeMismatch {
                expected: n_in,
                found: x.len(),
            });
        }
        let xs = Array2::from_shape_fn((n_in, n_in), |(_, j)| x[j]);
        let eye = Array2::from_shape_fn((n_in, n_in), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let pass = self.forward_pass(params, xs.view(), Some(eye.view()))?;
        let jac = pass.output_tangent.expect("tangent requested").reversed_axes();
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteValue("input gradient".into()));
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::params::ParamVector;
    use crate::rng::substream;

    fn net(act: Activation, hidden: Vec<usize>, input: usize) -> (Mlp, ParamVector) {
        let mut lb = LayoutBuilder::new();
        let spec = MlpSpec {
            input,
            hidden,
            output: 1,
            activation: act,
            linear_output: true,
        };
        let mlp = Mlp::new(spec, &mut lb, "mlp").unwrap();
        let mut pv = ParamVector::zeros(lb.finish());
        mlp.init(&mut pv.data, &mut substream(3, 0));
        (mlp, pv)
    }

    #[test]
    fn zero_params_give_zero_output_softplus_gives_final_bias() {
        let (mlp, mut pv) = net(Activation::Softplus, vec![4, 4], 2);
        pv.data.iter_mut().for_each(|v| *v = 0.0);
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let y = mlp.forward(&pv.data, x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let r = mlp.output_bias_range();
        pv.data[r.start] = 0.75;
        let y = mlp.forward(&pv.data, x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn identity_linear_layer() {
        let mut lb = LayoutBuilder::new();
        let spec = MlpSpec {
            input: 3,
            hidden: vec![],
            output: 3,
            activation: Activation::Tanh,
            linear_output: true,
        };
        let mlp = Mlp::new(spec, &mut lb, "lin").unwrap();
        let mut pv = ParamVector::zeros(lb.finish());
        let w = pv.segment_mut("lin.0.weight").unwrap();
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 3.5, 0.0, 7.0, -1e-3]).unwrap();
        assert_eq!(mlp.forward(&pv.data, x.view()).unwrap(), x);
    }

    #[test]
    fn batch_equals_stacked_rows() {
        let (mlp, pv) = net(Activation::Gelu, vec![7, 5], 3);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.5) * 0.3 + j as f64 * 0.7);
        let batch = mlp.forward(&pv.data, x.view()).unwrap();
        for i in 0..6 {
            let row = x.slice(ndarray::s![i..i + 1, ..]);
            let single = mlp.forward(&pv.data, row).unwrap();
            assert_eq!(single[[0, 0]], batch[[i, 0]]);
        }
    }

    #[test]
    fn shape_mismatch() {
        let (mlp, pv) = net(Activation::Tanh, vec![3], 2);
        let x = Array2::zeros((4, 3));
        assert!(matches!(
            mlp.forward(&pv.data, x.view()),
            Err(NnError::ShapeMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn linear_net_input_gradient_is_slope() {
        let mut lb = LayoutBuilder::new();
        let spec = MlpSpec {
            input: 1,
            hidden: vec![],
            output: 1,
            activation: Activation::Softplus,
            linear_output: true,
        };
        let mlp = Mlp::new(spec, &mut lb, "lin").unwrap();
        let mut pv = ParamVector::zeros(lb.finish());
        pv.data = vec![-2.5, 0.3];
        let j = mlp.grad_input(&pv.data, &[11.0]).unwrap();
        assert_eq!(j[[0, 0]], -2.5);
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let (mlp, pv) = net(Activation::Softplus, vec![6, 6], 2);
        let x = [0.3, -1.1];
        let j = mlp.grad_input(&pv.data, &x).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let f = |v: [f64; 2]| {
                mlp.forward(&pv.data, Array2::from_shape_vec((1, 2), v.to_vec()).unwrap().view())
                    .unwrap()[[0, 0]]
            };
            let fd = (f(xp) - f(xm)) / (2.0 * h);
            assert!((fd - j[[0, k]]).abs() < 1e-8);
        }
    }
}
