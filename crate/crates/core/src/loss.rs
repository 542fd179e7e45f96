//! Classification and label-embedding alignment losses.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// `‖X_q − X_z‖²`.
pub fn embedding_alignment_loss<T: Real>(tape: &mut Tape<T>, x_z: Var, x_q: Var) -> Result<Var> {
    if tape.value(x_z).numel() != tape.value(x_q).numel() {
        return Err(Error::dim("embedding_alignment_loss", tape.shape(x_z), tape.shape(x_q)));
    }
    let x_q = if tape.shape(x_q) == tape.shape(x_z) {
        x_q
    } else {
        let s = tape.shape(x_z).to_vec();
        tape.reshape(x_q, &s)?
    };
    let d = tape.sub(x_q, x_z)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

/// `l_cls + α·l_emb` on the tape.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, l_cls: Var, l_emb: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(l_emb, T::lit(alpha))?;
    tape.add(l_cls, weighted)
}

/// Scalar form of [`combined_loss`].
pub fn combined_loss_value(l_cls: f64, l_emb: f64, alpha: f64) -> f64 {
    l_cls + alpha * l_emb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn ce(logits: &[f64], label: usize) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row(logits.to_vec()).unwrap());
        let loss = cross_entropy(&mut tape, l, label).unwrap();
        tape.value(loss).item().unwrap()
    }

    fn emb(a: &[f64], b: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(a.to_vec()).unwrap());
        let y = tape.constant(Tensor::row(b.to_vec()).unwrap());
        let l = embedding_alignment_loss(&mut tape, x, y).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((ce(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!(ce(&[0.0, 30.0, 0.0], 1) < 1e-9);
        let base = ce(&[0.3, -1.0, 2.0], 0);
        assert!((ce(&[100.3, 99.0, 102.0], 0) - base).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::row(vec![0.0, 1.0]).unwrap());
        assert!(cross_entropy(&mut tape, l, 2).is_err());
    }

    #[test]
    fn alignment_cases() {
        let v = [0.3, -0.2, 0.9];
        assert_eq!(emb(&v, &v), 0.0);
        assert_eq!(emb(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert!((emb(&[0.1; 300], &[0.0; 300]) - 3.0).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row(vec![0.0, 1.0]).unwrap());
        let y = tape.constant(Tensor::row(vec![0.0, 1.0, 2.0]).unwrap());
        assert!(embedding_alignment_loss(&mut tape, x, y).is_err());
    }

    #[test]
    fn combined_cases() {
        assert_eq!(combined_loss_value(1.0, 0.02, 50.0), 2.0);
        assert_eq!(combined_loss_value(0.7, 0.3, 0.0), 0.7);
        assert_eq!(combined_loss_value(0.7, 0.0, 50.0), 0.7);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.02));
        let c = combined_loss(&mut tape, a, b, 50.0).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 2.0);
    }
}
