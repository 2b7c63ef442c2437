use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Partner map for views stored as adjacent rows: `(0, 1), (2, 3), ...`.
pub fn adjacent_pairs(rows: usize) -> Vec<usize> {
    (0..rows).map(|i| i ^ 1).collect()
}

/// Normalized temperature-scaled cross-entropy over `z[2N, d]`.
///
/// Row `i`'s positive is row `partners[i]`; every other row except `i`
/// itself is a negative. Rows are l2-normalized here, so the similarity is
/// the cosine. Returns the mean of the `2N` per-anchor terms
/// `-log(exp(s_ip / tau) / sum_{k != i} exp(s_ik / tau))`.
pub fn nt_xent_loss(tape: &mut Tape, z: Var, partners: &[usize], temperature: f32) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("nt_xent expects [2N, d], got {shape:?}")));
    }
    let rows = shape[0];
    if rows < 4 {
        return Err(Error::InvalidArgument(format!("nt_xent needs 2N >= 4 rows for a negative, got {rows}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if partners.len() != rows {
        return Err(Error::InvalidArgument(format!("{} partners for {rows} rows", partners.len())));
    }
    for (i, &p) in partners.iter().enumerate() {
        if p >= rows || p == i || partners[p] != i {
            return Err(Error::InvalidArgument(format!("partner map is not a pairing at row {i}")));
        }
    }
    let zn = tape.l2_normalize_rows(z)?;
    let sim = tape.matmul(zn, zn, true)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let diagonal: Vec<usize> = (0..rows).map(|i| i * rows + i).collect();
    let masked = tape.mask_fill(logits, &diagonal)?;
    let log_probs = tape.log_softmax_rows(masked)?;
    let positives: Vec<usize> = partners.iter().enumerate().map(|(i, &p)| i * rows + p).collect();
    let picked = tape.gather(log_probs, &positives)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}
