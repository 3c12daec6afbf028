use crate::tensor::{kernels, Graph, Tensor, Var};
use crate::{Error, Result};

/// Symmetric InfoNCE over a square similarity matrix:
/// `0.5 * (mean row CE + mean column CE)` of `S / tau` with the diagonal as
/// targets.
pub fn info_nce(s: &Tensor, tau: f64) -> Result<f64> {
    let (n, m) = s.dims2().ok_or_else(|| Error::shape("info_nce", format!("{:?}", s.shape())))?;
    if n != m || n == 0 {
        return Err(Error::shape("info_nce", format!("expected square matrix, got {:?}", s.shape())));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let logits: Vec<f64> = s.data().iter().map(|x| x / tau).collect();
    let t = kernels::transpose(&logits, n, n);
    let ce = |l: &[f64]| {
        let lse = kernels::logsumexp_rows(l, n);
        (0..n).map(|i| lse[i] - l[i * n + i]).sum::<f64>() / n as f64
    };
    Ok(0.5 * (ce(&logits) + ce(&t)))
}

/// Graph form of [`info_nce`].
pub fn info_nce_loss(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    info_nce_split(g, s, s, tau)
}

/// InfoNCE where the audio-to-text rows and the text-to-audio columns come
/// from different similarity matrices of the same shape.
pub fn info_nce_split(g: &mut Graph, rows: Var, cols: Var, tau: f64) -> Result<Var> {
    let shape = g.value(rows).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 || g.value(cols).shape() != shape.as_slice() {
        return Err(Error::shape(
            "info_nce",
            format!("{:?} and {:?}", shape, g.value(cols).shape()),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let n = shape[0];
    let targets: Vec<usize> = (0..n).collect();
    let r = g.scale(rows, 1.0 / tau);
    let row_ce = g.cross_entropy(r, &targets)?;
    let c = g.scale(cols, 1.0 / tau);
    let ct = g.transpose(c)?;
    let col_ce = g.cross_entropy(ct, &targets)?;
    let sum = g.add(row_ce, col_ce)?;
    Ok(g.scale(sum, 0.5))
}

/// Similarity matrix `audio · textᵀ` where anchor `i`'s row uses the given
/// replacement text embeddings at the listed slots. Replacements must be
/// `[1, d]` and may not sit on the diagonal.
pub fn apply_hard_negatives(g: &mut Graph, audio: Var, text: Var, plan: &[Vec<(usize, Var)>]) -> Result<Var> {
    let (n, d) = g
        .value(audio)
        .dims2()
        .ok_or_else(|| Error::shape("hard_negatives", format!("{:?}", g.value(audio).shape())))?;
    if g.value(text).shape() != [n, d] || plan.len() != n {
        return Err(Error::shape(
            "hard_negatives",
            format!("audio {:?}, text {:?}, plan {}", g.value(audio).shape(), g.value(text).shape(), plan.len()),
        ));
    }
    for (i, row) in plan.iter().enumerate() {
        for &(slot, v) in row {
            if slot == i || slot >= n {
                return Err(Error::InvalidArgument(format!(
                    "hard negative slot {slot} invalid for anchor {i} in batch of {n}"
                )));
            }
            if g.value(v).shape() != [1, d] {
                return Err(Error::shape("hard_negatives", format!("replacement {:?}", g.value(v).shape())));
            }
        }
    }
    let tt = g.transpose(text)?;
    let base = g.matmul(audio, tt)?;
    if plan.iter().all(Vec::is_empty) {
        return Ok(base);
    }
    let mut rows = Vec::with_capacity(n);
    for (i, row) in plan.iter().enumerate() {
        if row.is_empty() {
            rows.push(g.slice(base, 0, i, i + 1)?);
            continue;
        }
        let mut text_rows = Vec::with_capacity(n);
        for j in 0..n {
            // later entries for the same slot win
            match row.iter().rev().find(|(s, _)| *s == j) {
                Some(&(_, v)) => text_rows.push(v),
                None => text_rows.push(g.slice(text, 0, j, j + 1)?),
            }
        }
        let t_i = g.concat(&text_rows, 0)?;
        let t_i_t = g.transpose(t_i)?;
        let a_i = g.slice(audio, 0, i, i + 1)?;
        rows.push(g.matmul(a_i, t_i_t)?);
    }
    g.concat(&rows, 0)
}
