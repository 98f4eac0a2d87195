//! Training objectives: next-item cross-entropy, the frequency-domain
//! consistency loss, and their convex blend.

use crate::autograd::{Graph, Var};
use crate::config::DistanceKind;
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::IdTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub distance: DistanceKind,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Config(format!("beta = {beta} outside [0, 1]")))
    }
}

/// Scores `X_out · Mᵀ` against every real item (rows `1..` of the table).
/// Output shape is `… × V` where column `j` scores item `j + 1`.
pub fn item_logits(g: &mut Graph, x_out: Var, item_table: Var) -> Result<Var> {
    let rows = g.shape(item_table)[0];
    let items = g.slice_rows(item_table, 1, rows)?;
    let items_t = g.transpose_last(items)?;
    g.matmul(x_out, items_t)
}

/// Mean over valid positions of `-log softmax(X_out · Mᵀ)[target]`.
/// Targets are item ids (padding is 0 and must be masked out).
pub fn cross_entropy(
    g: &mut Graph,
    x_out: Var,
    item_table: Var,
    targets: &IdTensor,
    valid_mask: &[bool],
) -> Result<Var> {
    let logits = item_logits(g, x_out, item_table)?;
    let mut classes = Vec::with_capacity(targets.data().len());
    for (pos, (&t, &m)) in targets.data().iter().zip(valid_mask).enumerate() {
        if m && t == 0 {
            return Err(Error::Index(format!("padding target at valid position {pos}")));
        }
        classes.push(t.saturating_sub(1));
    }
    g.cross_entropy(logits, &classes, valid_mask)
}

/// `L1 = mean|P−T|`, `L2 = mean (P−T)²`, `mix = (L1 + L2) / 2`.
pub fn distance(g: &mut Graph, p: Var, t: Var, kind: DistanceKind) -> Result<Var> {
    if g.shape(p) != g.shape(t) {
        return Err(shape_mismatch("distance", g.shape(p), g.shape(t)));
    }
    let d = g.sub(p, t)?;
    let l1 = |g: &mut Graph| {
        let a = g.abs(d);
        g.mean(a)
    };
    let l2 = |g: &mut Graph| {
        let s = g.square(d);
        g.mean(s)
    };
    Ok(match kind {
        DistanceKind::L1 => l1(g),
        DistanceKind::L2 => l2(g),
        DistanceKind::Mix => {
            let a = l1(g);
            let b = l2(g);
            let s = g.add(a, b)?;
            g.scale(s, 0.5)
        }
    })
}

/// Distance between the time-axis spectra of `P` and `T`, taken separately
/// on real and imaginary parts and summed. Means run over the stored
/// half-spectrum coefficients.
pub fn frequency_loss(g: &mut Graph, p: Var, t: Var, kind: DistanceKind) -> Result<Var> {
    if g.shape(p) != g.shape(t) {
        return Err(shape_mismatch("frequency_loss", g.shape(p), g.shape(t)));
    }
    if g.shape(p).len() != 3 {
        return Err(Error::Dimension(format!(
            "frequency_loss expects B×L×D inputs, got {:?}",
            g.shape(p)
        )));
    }
    let (pr, pi) = g.rdft(p, 1)?;
    let (tr, ti) = g.rdft(t, 1)?;
    let real = distance(g, pr, tr, kind)?;
    let imag = distance(g, pi, ti, kind)?;
    g.add(real, imag)
}

/// `(1−β)·L_F + β·L_CE`. Endpoints return the surviving term unchanged.
pub fn total_loss(g: &mut Graph, ce: Var, lf: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    if beta == 1.0 {
        return Ok(ce);
    }
    if beta == 0.0 {
        return Ok(lf);
    }
    let a = g.scale(lf, 1.0 - beta);
    let b = g.scale(ce, beta);
    g.add(a, b)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(ce: f64, lf: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok((1.0 - beta) * lf + beta * ce)
}
