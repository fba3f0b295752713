use msas_tensor::{Result, Tape, Tensor, TensorError, Var};

const NORM_TOLERANCE: f64 = 1e-4;

fn check_unit_rows(name: &'static str, data: &[f64], rows: usize, dim: usize) -> Result<()> {
    for row in 0..rows {
        let norm =
            data[row * dim..(row + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(TensorError::InvalidArg {
                op: "ntxent_loss",
                detail: format!("{name} row {row} has norm {norm}, expected 1"),
            });
        }
    }
    Ok(())
}

/// Queue-based InfoNCE: mean over the batch of
/// `-log( exp(q.k+ / t) / (exp(q.k+ / t) + sum_j exp(q.queue_j / t)) )`.
///
/// `q` lives on the tape and receives gradients; the positive keys and the
/// queue are plain tensors, detached by construction. All rows must be unit
/// norm (tolerance 1e-4). An empty queue (0 rows) degenerates to zero loss.
pub fn ntxent_loss(
    tape: &mut Tape,
    q: Var,
    k_pos: &Tensor,
    queue: &Tensor,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(TensorError::InvalidArg {
            op: "ntxent_loss",
            detail: format!("temperature must be > 0, got {temperature}"),
        });
    }
    let (n, d) = tape.value(q).dims2("ntxent_loss")?;
    let (nk, dk) = k_pos.dims2("ntxent_loss")?;
    if (nk, dk) != (n, d) {
        return Err(TensorError::ShapeMismatch {
            op: "ntxent_loss",
            detail: format!("q is {n}x{d}, k_pos is {nk}x{dk}"),
        });
    }
    let (m, dq) = queue.dims2("ntxent_loss")?;
    if m > 0 && dq != d {
        return Err(TensorError::ShapeMismatch {
            op: "ntxent_loss",
            detail: format!("queue dim {dq}, embeddings dim {d}"),
        });
    }
    check_unit_rows("q", tape.value(q).data(), n, d)?;
    check_unit_rows("k_pos", k_pos.data(), n, d)?;
    check_unit_rows("queue", queue.data(), m, d.max(1))?;

    let k_const = tape.constant(k_pos.clone());
    let l_pos = tape.rowdot(q, k_const)?;
    let logits = if m > 0 {
        // queue^T as a constant: gradients flow to q only
        let mut qt = vec![0.0; m * d];
        for row in 0..m {
            for col in 0..d {
                qt[col * m + row] = queue.data()[row * d + col];
            }
        }
        let queue_t = tape.constant(Tensor::new(vec![d, m], qt)?);
        let l_neg = tape.matmul(q, queue_t)?;
        tape.concat_cols(l_pos, l_neg)?
    } else {
        l_pos
    };
    let scaled = tape.scalar_div(logits, temperature)?;
    tape.softmax_xent(scaled, &vec![0usize; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|v| v / norm));
        }
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k_plus_one() {
        // all similarities equal: q.k+ == q.queue_j for K = 4
        let mut tape = Tape::new();
        let q = tape.leaf(unit_rows(&[&[1.0, 0.0]]), true);
        let k = unit_rows(&[&[1.0, 0.0]]);
        let queue = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let loss = ntxent_loss(&mut tape, q, &k, &queue, 0.07).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hand_case_matches_independent_softmax() {
        // q=[1,0], k+=[1,0], queue={[0,1], [-1,0]}, tau=0.5:
        // logits/tau = [2, 0, -2], loss = ln(1 + e^-2 + e^-4)
        let mut tape = Tape::new();
        let q = tape.leaf(unit_rows(&[&[1.0, 0.0]]), true);
        let k = unit_rows(&[&[1.0, 0.0]]);
        let queue = unit_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let loss = ntxent_loss(&mut tape, q, &k, &queue, 0.5).unwrap();
        let expected = (1.0 + (-2.0f64).exp() + (-4.0f64).exp()).ln();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_shrinks_toward_zero_with_separation_and_temperature() {
        // fixed opposing negatives, sweep temperature down: loss -> 0,
        // and loss decreases monotonically in the positive similarity
        let k = unit_rows(&[&[1.0, 0.0]]);
        let queue = unit_rows(&[&[-1.0, 0.0]]);
        let loss_at = |tau: f64, align: f64| {
            let mut tape = Tape::new();
            let q = tape.leaf(unit_rows(&[&[align, (1.0 - align * align).sqrt()]]), false);
            let l = ntxent_loss(&mut tape, q, &k, &queue, tau).unwrap();
            tape.value(l).item().unwrap()
        };
        let mut prev = loss_at(0.5, 1.0);
        for tau in [0.2, 0.1, 0.05] {
            let cur = loss_at(tau, 1.0);
            assert!(cur < prev);
            prev = cur;
        }
        assert!(loss_at(0.05, 1.0) < 1e-10);
        // monotone in alignment at fixed tau
        let mut prev = f64::INFINITY;
        for align in [0.0, 0.25, 0.5, 0.75, 0.95] {
            let cur = loss_at(0.2, align);
            assert!(cur < prev, "loss must fall as q.k+ rises");
            prev = cur;
        }
    }

    #[test]
    fn rejects_non_normalized_inputs() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap(), true);
        let k = unit_rows(&[&[1.0, 0.0]]);
        let queue = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(ntxent_loss(&mut tape, q, &k, &queue, 0.1).is_err());
    }

    #[test]
    fn gradient_reaches_queries_only_and_loss_is_nonnegative() {
        let mut tape = Tape::new();
        let q = tape.leaf(unit_rows(&[&[0.8, 0.6], &[0.0, 1.0]]), true);
        let k = unit_rows(&[&[1.0, 0.1], &[0.3, 1.0]]);
        let queue = unit_rows(&[&[0.5, 0.5], &[-0.7, 0.7], &[1.0, 0.0], &[0.0, -1.0]]);
        let loss = ntxent_loss(&mut tape, q, &k, &queue, 0.07).unwrap();
        assert!(tape.value(loss).item().unwrap() >= 0.0);
        tape.backward(loss).unwrap();
        let g = tape.grad(q).expect("queries get gradients");
        assert!(g.data().iter().any(|&v| v != 0.0));
        // constants recorded after q are the only other nodes; none may
        // carry gradient buffers
        for idx in 0..tape.len() {
            let var = Var(idx);
            if var != q && !tape.requires_grad(var) {
                assert!(tape.grad(var).is_none());
            }
        }
    }
}
