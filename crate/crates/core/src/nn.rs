//! Shared building blocks: parameter bookkeeping, dropout, and the
//! position-wise feed-forward network.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declares the trainable tensors of a block. Generates a `…Vars` struct of
/// graph handles plus `bind`, `tensors`, `tensors_mut`, and `PARAM_NAMES`,
/// all listing fields in the same order.
macro_rules! parameters {
    ($ty:ident => $vars:ident { $($field:ident),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::autograd::Var),+
        }

        impl $vars {
            pub fn all(&self) -> Vec<$crate::autograd::Var> {
                vec![$(self.$field),+]
            }
        }

        impl $ty {
            pub const PARAM_NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn tensors(&self) -> Vec<&$crate::tensor::Tensor> {
                vec![$(&self.$field),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut $crate::tensor::Tensor> {
                vec![$(&mut self.$field),+]
            }

            /// Registers every parameter as a trainable leaf.
            pub fn bind(&self, g: &mut $crate::autograd::Graph) -> $vars {
                $vars { $($field: g.param(self.$field.clone())),+ }
            }

            /// Registers every parameter as a constant.
            pub fn bind_frozen(&self, g: &mut $crate::autograd::Graph) -> $vars {
                $vars { $($field: g.constant(self.$field.clone())),+ }
            }
        }
    };
}
pub(crate) use parameters;

/// Inverted dropout. Identity when not training or when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    g.mul_const(x, &mask)
}

/// Position-wise two-layer network with a GELU hidden layer, wrapped in a
/// residual and layer norm: `LN(W2·gelu(W1·x + b1) + b2 + x [+ extra])`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

parameters!(FeedForward => FeedForwardVars { w1, b1, w2, b2, ln_gain, ln_bias });

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(&[dim, hidden], std, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, dim], std, rng),
            b2: Tensor::zeros(&[dim]),
            ln_gain: Tensor::ones(&[dim]),
            ln_bias: Tensor::zeros(&[dim]),
        }
    }
}

/// Applies the feed-forward block to `x`; `extra`, when given, joins the
/// residual stream next to `x`.
#[allow(clippy::too_many_arguments)]
pub fn feed_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &FeedForwardVars,
    x: Var,
    extra: Option<Var>,
    eps: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add(h, p.b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, p.w2)?;
    let h = g.add(h, p.b2)?;
    let h = dropout(g, h, dropout_rate, training, rng)?;
    let mut residual = g.add(h, x)?;
    if let Some(e) = extra {
        residual = g.add(residual, e)?;
    }
    g.layer_norm(residual, p.ln_gain, p.ln_bias, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[10], |i| i as f64));
        assert_eq!(dropout(&mut g, x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&mut g, x, 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let y = dropout(&mut g, x, 0.5, true, &mut rng).unwrap();
        let vals = g.value(y).data();
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
        assert!((0.49..=0.51).contains(&kept), "{kept}");
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
