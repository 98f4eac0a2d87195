//! Learnable spectral filtering: the complex-valued frequency MLP, the
//! batch-axis (cohort) and time-axis (per-user) filters built from it, their
//! fusion, and the gated merge with the attention branch.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{Activation, FusionMode};
use crate::error::{Error, Result};
use crate::nn::{dropout, feed_forward, parameters, FeedForward, FeedForwardVars};
use crate::spectral::{self, ComplexSpectrum};
use crate::tensor::Tensor;

/// Complex linear map on the feature axis of a spectrum,
/// `(W_r + iW_i)(Re + iIm) + (B_r + iB_i)`, followed by a nonlinearity on
/// each part. Weights act on row vectors: `out_j = Σ_i in_i W[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMlp {
    pub w_r: Tensor,
    pub w_i: Tensor,
    pub b_r: Tensor,
    pub b_i: Tensor,
}

parameters!(FreqMlp => FreqMlpVars { w_r, w_i, b_r, b_i });

impl FreqMlp {
    /// The transparent filter: `W_r = I`, everything else zero.
    pub fn identity(dim: usize) -> Self {
        Self {
            w_r: Tensor::eye(dim),
            w_i: Tensor::zeros(&[dim, dim]),
            b_r: Tensor::zeros(&[dim]),
            b_i: Tensor::zeros(&[dim]),
        }
    }

    /// Identity plus small Gaussian noise on both weight matrices.
    pub fn near_identity<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        let noise = Tensor::randn(&[dim, dim], std, rng);
        Self {
            w_r: Tensor::eye(dim).zip_with(&noise, |a, b| a + b).expect("same shape"),
            w_i: Tensor::randn(&[dim, dim], std, rng),
            b_r: Tensor::zeros(&[dim]),
            b_i: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_r.shape()[0]
    }
}

/// A half-spectrum living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct SpectrumVars {
    pub real: Var,
    pub imag: Var,
    pub axis: usize,
    pub len: usize,
}

pub fn rdft_vars(g: &mut Graph, x: Var, axis: usize) -> Result<SpectrumVars> {
    let len = g
        .shape(x)
        .get(axis)
        .copied()
        .ok_or_else(|| Error::Dimension(format!("axis {axis} for shape {:?}", g.shape(x))))?;
    let (real, imag) = g.rdft(x, axis)?;
    Ok(SpectrumVars { real, imag, axis, len })
}

pub fn irdft_vars(g: &mut Graph, s: SpectrumVars) -> Result<Var> {
    g.irdft(s.real, s.imag, s.axis, s.len)
}

pub(crate) fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => g.leaky_relu(x, 0.0),
        Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
    }
}

/// `C^r = Φ(Re·W_r − Im·W_i + B_r)`, `C^i = Φ(Re·W_i + Im·W_r + B_i)`.
pub fn freq_mlp_apply(
    g: &mut Graph,
    s: SpectrumVars,
    p: &FreqMlpVars,
    act: Activation,
) -> Result<SpectrumVars> {
    let d = g.shape(p.w_r)[0];
    let feat = *g.shape(s.real).last().expect("non-empty");
    if feat != d || s.axis + 1 == g.shape(s.real).len() {
        return Err(Error::Dimension(format!(
            "frequency MLP of width {d} applied to spectrum {:?} along axis {}",
            g.shape(s.real),
            s.axis
        )));
    }
    let rr = g.matmul(s.real, p.w_r)?;
    let ii = g.matmul(s.imag, p.w_i)?;
    let real = g.sub(rr, ii)?;
    let real = g.add(real, p.b_r)?;
    let ri = g.matmul(s.real, p.w_i)?;
    let ir = g.matmul(s.imag, p.w_r)?;
    let imag = g.add(ri, ir)?;
    let imag = g.add(imag, p.b_i)?;
    Ok(SpectrumVars {
        real: activate(g, real, act),
        imag: activate(g, imag, act),
        ..s
    })
}

/// `irdft(FreqMLP(rdft(x)))` along `axis`.
pub fn spectral_filter(
    g: &mut Graph,
    x: Var,
    axis: usize,
    p: &FreqMlpVars,
    act: Activation,
) -> Result<Var> {
    let s = rdft_vars(g, x, axis)?;
    let s = freq_mlp_apply(g, s, p, act)?;
    irdft_vars(g, s)
}

/// Cohort-level filter: the transform runs across the batch axis of a
/// `B × L × D` tensor, so each position/feature pair is treated as a signal
/// over users.
pub fn global_spectral_aggregator(
    g: &mut Graph,
    e: Var,
    p: &FreqMlpVars,
    act: Activation,
) -> Result<Var> {
    check_rank3(g, e)?;
    spectral_filter(g, e, 0, p, act)
}

/// Per-user filter along the time axis of a `B × L × D` tensor.
pub fn local_spectral_refiner(
    g: &mut Graph,
    e: Var,
    p: &FreqMlpVars,
    act: Activation,
) -> Result<Var> {
    check_rank3(g, e)?;
    spectral_filter(g, e, 1, p, act)
}

fn check_rank3(g: &Graph, x: Var) -> Result<()> {
    if g.shape(x).len() != 3 {
        return Err(Error::Dimension(format!(
            "expected a B×L×D tensor, got {:?}",
            g.shape(x)
        )));
    }
    Ok(())
}

/// Applies `f` to a plain spectrum (no gradient tracking).
pub fn freq_mlp_apply_spectrum(
    s: &ComplexSpectrum,
    f: &FreqMlp,
    act: Activation,
) -> Result<ComplexSpectrum> {
    let mut g = Graph::new();
    let p = f.bind_frozen(&mut g);
    let real = g.constant(s.real.clone());
    let imag = g.constant(s.imag.clone());
    let out = freq_mlp_apply(
        &mut g,
        SpectrumVars {
            real,
            imag,
            axis: s.axis,
            len: s.original_length,
        },
        &p,
        act,
    )?;
    Ok(ComplexSpectrum {
        real: g.value(out.real).clone(),
        imag: g.value(out.imag).clone(),
        axis: s.axis,
        original_length: s.original_length,
    })
}

/// Runs a spectral filter on a plain tensor along `axis`.
pub fn spectral_filter_tensor(x: &Tensor, axis: usize, f: &FreqMlp, act: Activation) -> Result<Tensor> {
    let s = spectral::rdft(x, axis)?;
    let filtered = freq_mlp_apply_spectrum(&s, f, act)?;
    Ok(spectral::irdft_real_part(&filtered))
}

/// Parameters of the frequency branch.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqNetBlock {
    pub gsa: FreqMlp,
    pub lsr: FreqMlp,
    pub ffn: FeedForward,
    /// Layer norm closing the gated residual merge.
    pub out_ln_gain: Tensor,
    pub out_ln_bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct FreqNetVars {
    pub gsa: FreqMlpVars,
    pub lsr: FreqMlpVars,
    pub ffn: FeedForwardVars,
    pub out_ln_gain: Var,
    pub out_ln_bias: Var,
}

impl FreqNetBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, ff_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            gsa: FreqMlp::near_identity(dim, std, rng),
            lsr: FreqMlp::near_identity(dim, std, rng),
            ffn: FeedForward::new(dim, ff_dim, std, rng),
            out_ln_gain: Tensor::ones(&[dim]),
            out_ln_bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> FreqNetVars {
        FreqNetVars {
            gsa: self.gsa.bind(g),
            lsr: self.lsr.bind(g),
            ffn: self.ffn.bind(g),
            out_ln_gain: g.param(self.out_ln_gain.clone()),
            out_ln_bias: g.param(self.out_ln_bias.clone()),
        }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> FreqNetVars {
        FreqNetVars {
            gsa: self.gsa.bind_frozen(g),
            lsr: self.lsr.bind_frozen(g),
            ffn: self.ffn.bind_frozen(g),
            out_ln_gain: g.constant(self.out_ln_gain.clone()),
            out_ln_bias: g.constant(self.out_ln_bias.clone()),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.gsa.tensors();
        t.extend(self.lsr.tensors());
        t.extend(self.ffn.tensors());
        t.push(&self.out_ln_gain);
        t.push(&self.out_ln_bias);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.gsa.tensors_mut();
        t.extend(self.lsr.tensors_mut());
        t.extend(self.ffn.tensors_mut());
        t.push(&mut self.out_ln_gain);
        t.push(&mut self.out_ln_bias);
        t
    }

    pub fn param_names() -> Vec<String> {
        let mut names: Vec<String> = FreqMlp::PARAM_NAMES.iter().map(|n| format!("gsa.{n}")).collect();
        names.extend(FreqMlp::PARAM_NAMES.iter().map(|n| format!("lsr.{n}")));
        names.extend(FeedForward::PARAM_NAMES.iter().map(|n| format!("ffn.{n}")));
        names.push("out_ln_gain".into());
        names.push("out_ln_bias".into());
        names
    }
}

impl FreqNetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.gsa.all();
        v.extend(self.lsr.all());
        v.extend(self.ffn.all());
        v.push(self.out_ln_gain);
        v.push(self.out_ln_bias);
        v
    }
}

/// Non-parameter knobs of the frequency branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqNetSettings {
    pub fusion: FusionMode,
    pub gamma: f64,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    /// Replace the cohort filter by passthrough.
    pub disable_gsa: bool,
    /// Replace the per-user filter by passthrough.
    pub disable_lsr: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FreqNetOutput {
    /// Output of the fusion feed-forward block.
    pub x_f: Var,
    /// What the fusion feed-forward block received as its main input.
    pub fused: Var,
    pub x_inter: Var,
    pub x_intra: Var,
}

/// Runs both spectral paths on `e` and fuses them.
///
/// Parallel: `FFN((1-γ)·X_inter + γ·X_intra, E)` with both filters reading
/// `E`. Serial: the per-user filter reads `E + X_inter` and
/// `FFN(X_intra, E)` follows. A disabled filter passes its input through.
pub fn freqnet_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &FreqNetVars,
    e: Var,
    s: &FreqNetSettings,
    training: bool,
    rng: &mut R,
) -> Result<FreqNetOutput> {
    if !(0.0..=1.0).contains(&s.gamma) {
        return Err(Error::Config(format!("gamma = {} outside [0, 1]", s.gamma)));
    }
    let x_inter = if s.disable_gsa {
        e
    } else {
        global_spectral_aggregator(g, e, &p.gsa, s.activation)?
    };
    let (fused, x_intra) = match s.fusion {
        FusionMode::Parallel => {
            let x_intra = if s.disable_lsr {
                e
            } else {
                local_spectral_refiner(g, e, &p.lsr, s.activation)?
            };
            let a = g.scale(x_inter, 1.0 - s.gamma);
            let b = g.scale(x_intra, s.gamma);
            (g.add(a, b)?, x_intra)
        }
        FusionMode::Serial => {
            let e_intra = if s.disable_gsa { e } else { g.add(e, x_inter)? };
            let x_intra = if s.disable_lsr {
                e_intra
            } else {
                local_spectral_refiner(g, e_intra, &p.lsr, s.activation)?
            };
            (x_intra, x_intra)
        }
    };
    let x_f = feed_forward(
        g,
        &p.ffn,
        fused,
        Some(e),
        s.layer_norm_eps,
        s.dropout_rate,
        training,
        rng,
    )?;
    Ok(FreqNetOutput {
        x_f,
        fused,
        x_inter,
        x_intra,
    })
}

/// `X = (1-α)·X_SA + α·X_F`, then `LN(dropout(gelu(X)) + X)`. A missing
/// branch contributes nothing and the other is used alone.
#[allow(clippy::too_many_arguments)]
pub fn gated_residual_merge<R: Rng + ?Sized>(
    g: &mut Graph,
    x_sa: Option<Var>,
    x_f: Option<Var>,
    alpha: f64,
    ln_gain: Var,
    ln_bias: Var,
    eps: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")));
    }
    let x = match (x_sa, x_f) {
        (Some(sa), Some(f)) => {
            let a = g.scale(sa, 1.0 - alpha);
            let b = g.scale(f, alpha);
            g.add(a, b)?
        }
        (Some(sa), None) => sa,
        (None, Some(f)) => f,
        (None, None) => return Err(Error::Config("both branches disabled".into())),
    };
    let h = g.gelu(x);
    let h = dropout(g, h, dropout_rate, training, rng)?;
    let h = g.add(h, x)?;
    g.layer_norm(h, ln_gain, ln_bias, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn identity_filter_is_transparent_on_spectra() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 5, 4], 1.0, &mut r);
        let s = spectral::rdft(&x, 1).unwrap();
        let out = freq_mlp_apply_spectrum(&s, &FreqMlp::identity(4), Activation::Identity).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn doubled_filter_doubles_signal() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 6, 3], 1.0, &mut r);
        let mut f = FreqMlp::identity(3);
        f.w_r = f.w_r.scale(2.0);
        let y = spectral_filter_tensor(&x, 1, &f, Activation::Identity).unwrap();
        assert!(y.max_abs_diff(&x.scale(2.0)) < 1e-12);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 6, 3], 1.0, &mut r);
        let s = spectral::rdft(&x, 1).unwrap();
        let err = freq_mlp_apply_spectrum(&s, &FreqMlp::identity(4), Activation::Identity);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn alpha_out_of_range_is_config_error() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 2]));
        let one = g.constant(Tensor::ones(&[2]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let err = gated_residual_merge(&mut g, Some(x), Some(x), 1.2, one, zero, 1e-12, 0.0, false, &mut r);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
