//! Softmax-based objectives: prediction entropy and cross-entropy.

use crate::tensor::{Result, Tape, TensorError, Var, VjpRule};

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of `softmax(row)`.
pub fn entropy(row: &[f64]) -> f64 {
    let h: f64 = log_softmax(row).iter().map(|lp| -lp.exp() * lp).sum();
    // Rounding can leave a tiny negative value for one-hot rows.
    h.max(0.0)
}

fn check_logits(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] < 2 {
        return Err(TensorError::Contract(format!(
            "logits must be [batch × classes] with at least two classes, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

struct EntropyRule {
    classes: usize,
    log_probs: Vec<f64>,
    entropies: Vec<f64>,
}

impl VjpRule for EntropyRule {
    fn vjp(&self, g: &[f64], _wants: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.classes;
        let mut out = Vec::with_capacity(self.log_probs.len());
        for (i, gi) in g.iter().enumerate() {
            let h = self.entropies[i];
            for &lp in &self.log_probs[i * c..(i + 1) * c] {
                out.push(-gi * lp.exp() * (lp + h));
            }
        }
        vec![Some(out)]
    }
}

/// Per-row entropies `[batch]` of `logits [batch × classes]`.
pub fn row_entropies(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (n, c) = check_logits(tape, logits)?;
    let z = tape.value(logits);
    let mut log_probs = Vec::with_capacity(n * c);
    let mut entropies = Vec::with_capacity(n);
    for row in z.chunks(c) {
        let lp = log_softmax(row);
        entropies.push(lp.iter().map(|l| -l.exp() * l).sum());
        log_probs.extend(lp);
    }
    let rule = EntropyRule {
        classes: c,
        log_probs,
        entropies: entropies.clone(),
    };
    tape.custom(&[logits], vec![n], entropies, Box::new(rule))
}

struct CrossEntropyRule {
    classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl VjpRule for CrossEntropyRule {
    fn vjp(&self, g: &[f64], _wants: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len() as f64;
        let mut out = self.probs.clone();
        for (i, &y) in self.labels.iter().enumerate() {
            out[i * self.classes + y] -= 1.0;
        }
        out.iter_mut().for_each(|v| *v *= g[0] / n);
        vec![Some(out)]
    }
}

/// Mean cross-entropy of integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = check_logits(tape, logits)?;
    if labels.len() != n {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            left: vec![n, c],
            right: vec![labels.len()],
        });
    }
    if let Some(i) = labels.iter().position(|&y| y >= c) {
        return Err(TensorError::Domain {
            op: "cross_entropy",
            index: i,
            value: labels[i] as f64,
        });
    }
    let z = tape.value(logits);
    let mut probs = Vec::with_capacity(n * c);
    let mut total = 0.0;
    for (row, &y) in z.chunks(c).zip(labels) {
        let lp = log_softmax(row);
        total -= lp[y];
        probs.extend(lp.iter().map(|l| l.exp()));
    }
    let rule = CrossEntropyRule {
        classes: c,
        probs,
        labels: labels.to_vec(),
    };
    tape.custom(&[logits], Vec::new(), vec![total / n as f64], Box::new(rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, Tensor};

    #[test]
    fn entropy_values() {
        assert!(entropy(&[100.0, 0.0, 0.0]) < 1e-8);
        assert!((entropy(&[0.0; 10]) - 10f64.ln()).abs() < 1e-12);
        // Direct summation over p = e^z / Σ e^z.
        let z = [1.0f64, 2.0, 3.0];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        let direct: f64 = z.iter().map(|v| v.exp() / s).map(|p| -p * p.ln()).sum();
        assert!((entropy(&z) - direct).abs() < 1e-14);
        // 30-digit reference: 0.832395581839938872951923725855
        assert!((direct - 0.832_395_581_839_938_9).abs() < 1e-12);
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let h = row_entropies(&mut tape, v).unwrap();
        let s = tape.sum(h);
        let g = tape.backward(s).unwrap();
        let fd = finite_diff_grad(|t| entropy(t.data()), &x, 1e-5).unwrap();
        for (a, n) in g.get(v).unwrap().iter().zip(fd.data()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn entropy_gradient_matches_composed_primitives() {
        // H = log Σe^z − Σ softmax(z)·z, built from exp/log/sum on the tape.
        let z = Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&z);
        let fused = row_entropies(&mut tape, v).unwrap();
        let s1 = tape.sum(fused);
        let g1 = tape.backward(s1).unwrap().get(v).unwrap().to_vec();

        let mut tape = Tape::new();
        let v = tape.leaf(&z);
        let e = tape.exp(v);
        let se = tape.sum(e);
        let lse = tape.log(se).unwrap();
        let p = tape.div(e, se).unwrap();
        let pz = tape.mul(p, v).unwrap();
        let spz = tape.sum(pz);
        let h = tape.sub(lse, spz).unwrap();
        let g2 = tape.backward(h).unwrap().get(v).unwrap().to_vec();
        assert!((tape.value(h)[0] - entropy(z.data())).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.5, -0.2, 1.0, 2.0, 0.1, -1.0]).unwrap().with_requires_grad(true);
        let labels = [2, 0];
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let l = cross_entropy(&mut tape, v, &labels).unwrap();
        let g = tape.backward(l).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let mut tp = Tape::new();
                let v = tp.leaf(t);
                let l = cross_entropy(&mut tp, v, &labels).unwrap();
                tp.value(l)[0]
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (a, n) in g.get(v).unwrap().iter().zip(fd.data()) {
            assert!((a - n).abs() < 1e-8);
        }
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(cross_entropy(&mut tape, v, &[3, 0]).is_err());
    }
}
