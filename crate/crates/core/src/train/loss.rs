//! Distillation and language-modeling losses with their logit gradients.

use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, softmax_rows, Matrix};

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `−(1/k) Σ_i Σ_c p_T log p_S` over the `k` rows.
pub fn ce_distill_loss(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<f64> {
    Ok(ce_distill_with_grad(teacher_logits, student_logits)?.0)
}

/// Loss and its gradient with respect to the student logits, `(p_S − p_T)/k`.
pub fn ce_distill_with_grad(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<(f64, Matrix)> {
    check_same(teacher_logits, student_logits, "distillation logits")?;
    let k = teacher_logits.rows();
    if k == 0 {
        return Err(Error::shape("distillation loss over zero rows"));
    }
    let p_t = softmax_rows(teacher_logits);
    let mut grad = softmax_rows(student_logits);
    let mut loss = 0.0;
    for i in 0..k {
        let s = student_logits.row(i);
        let lse = log_sum_exp(s);
        let pt = p_t.row(i);
        let mut row = 0.0;
        for (p, z) in pt.iter().zip(s) {
            if *p > 0.0 {
                row -= p * (z - lse);
            }
        }
        loss += row;
        for (g, p) in grad.row_mut(i).iter_mut().zip(pt) {
            *g = (*g - p) / k as f64;
        }
    }
    Ok((loss / k as f64, grad))
}

/// Mean next-token negative log-likelihood and its logit gradient.
pub fn next_token_nll_with_grad(logits: &Matrix, targets: &[u8]) -> Result<(f64, Matrix)> {
    let k = logits.rows();
    if k == 0 || targets.len() != k {
        return Err(Error::shape(format!("{} logit rows for {} targets", k, targets.len())));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Value(format!("target {t} outside a {}-symbol vocabulary", row.len())));
        }
        loss += log_sum_exp(row) - row[t];
        let g = grad.row_mut(i);
        g[t] -= 1.0;
        for v in g.iter_mut() {
            *v /= k as f64;
        }
    }
    Ok((loss / k as f64, grad))
}

/// Summed negative log-likelihood of `targets` under `logits`.
pub fn nll_sum(logits: &Matrix, targets: &[u8]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[t as usize];
    }
    Ok(total)
}

/// `Σ_l MSE(H_l^T, H_l^S)` with each MSE averaged over all entries.
pub fn l2l_loss(teacher_hiddens: &[Matrix], student_hiddens: &[Matrix]) -> Result<f64> {
    Ok(l2l_with_grad(teacher_hiddens, student_hiddens)?.0)
}

/// Loss and per-layer gradients with respect to the student hiddens.
pub fn l2l_with_grad(teacher_hiddens: &[Matrix], student_hiddens: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if teacher_hiddens.len() != student_hiddens.len() {
        return Err(Error::shape(format!(
            "{} teacher hiddens vs {} student hiddens",
            teacher_hiddens.len(),
            student_hiddens.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student_hiddens.len());
    for (t, s) in teacher_hiddens.iter().zip(student_hiddens) {
        check_same(t, s, "layer hiddens")?;
        let count = t.data().len().max(1) as f64;
        let diff = s.sub(t)?;
        loss += diff.sum_sq() / count;
        grads.push(diff.scale(2.0 / count));
    }
    Ok((loss, grads))
}

pub fn total_loss(ce: f64, l2l: f64, lambda_l2l: f64) -> f64 {
    ce + lambda_l2l * l2l
}
