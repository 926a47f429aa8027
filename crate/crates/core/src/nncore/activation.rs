use serde::{Deserialize, Serialize};

use super::tape::Var;

/// Pointwise nonlinearity with first and second derivatives. The second
/// derivative is needed to back-propagate through input tangents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => z.max(0.0) + (1.0 + (-z.abs()).exp()).ln(),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh()),
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Softplus => {
                let e = (-z.abs()).exp();
                let inv = 1.0 / (1.0 + e);
                let s = if z >= 0.0 { inv } else { e * inv };
                (z.max(0.0) + (1.0 + e).ln(), s, s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Gelu => {
                let u = GELU_K * (z + GELU_C * z * z * z);
                let du = GELU_K * (1.0 + 3.0 * GELU_C * z * z);
                let ddu = 6.0 * GELU_K * GELU_C * z;
                let th = u.tanh();
                let sech2 = 1.0 - th * th;
                let v = 0.5 * z * (1.0 + th);
                let d1 = 0.5 * (1.0 + th) + 0.5 * z * sech2 * du;
                let d2 = sech2 * (du + 0.5 * z * (ddu - 2.0 * th * du * du));
                (v, d1, d2)
            }
        }
    }

    /// Value on the tape.
    pub fn var<'t>(self, z: Var<'t>) -> Var<'t> {
        match self {
            Activation::Softplus => z.softplus(),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => {
                let u = (z + z * z * z * GELU_C) * GELU_K;
                z * 0.5 * (u.tanh() + 1.0)
            }
        }
    }

    /// First derivative on the tape.
    pub fn deriv_var<'t>(self, z: Var<'t>) -> Var<'t> {
        match self {
            Activation::Softplus => z.sigmoid(),
            Activation::Tanh => {
                let t = z.tanh();
                -(t * t) + 1.0
            }
            Activation::Gelu => {
                let u = (z + z * z * z * GELU_C) * GELU_K;
                let du = (z * z * (3.0 * GELU_C) + 1.0) * GELU_K;
                let th = u.tanh();
                let sech2 = -(th * th) + 1.0;
                (th + 1.0) * 0.5 + z * sech2 * du * 0.5
            }
        }
    }
}
