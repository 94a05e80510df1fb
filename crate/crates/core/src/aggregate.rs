//! Fusing the semantic and structural vectors of an item.

use crate::autodiff::{Tape, Var};
use crate::config::Aggregation;
use crate::error::{Error, Result};

/// `s` followed by `p`.
pub fn aggregate_concat(s: &[f64], p: &[f64]) -> Vec<f64> {
    let mut r = Vec::with_capacity(s.len() + p.len());
    r.extend_from_slice(s);
    r.extend_from_slice(p);
    r
}

/// Elementwise mean of equally long vectors.
pub fn aggregate_average(s: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if s.len() != p.len() {
        return Err(Error::Config(format!(
            "average aggregation needs equal widths, got semantic {} and structural {}",
            s.len(),
            p.len()
        )));
    }
    Ok(s.iter().zip(p).map(|(a, b)| (a + b) / 2.0).collect())
}

/// Row-wise fusion of two `M × d` matrices on the tape.
pub fn aggregate(tape: &mut Tape, mode: Aggregation, s: Var, p: Var) -> Result<Var> {
    match mode {
        Aggregation::Concat => tape.concat_cols(&[s, p]),
        Aggregation::Average => {
            let (ws, wp) = (tape.value(s).cols(), tape.value(p).cols());
            if ws != wp {
                return Err(Error::Config(format!(
                    "average aggregation needs equal widths, got semantic {ws} and structural {wp}"
                )));
            }
            let sum = tape.add(s, p)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn examples() {
        assert_eq!(
            aggregate_concat(&[1.0, 2.0], &[3.0, 4.0]),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(aggregate_concat(&[0.5; 256], &[0.0; 256]).len(), 512);
        assert_eq!(
            aggregate_average(&[2.0, 4.0], &[0.0, 0.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            aggregate_average(&[1.0, 1.0], &[3.0, 5.0]).unwrap(),
            vec![2.0, 3.0]
        );
        let msg = aggregate_average(&[1.0; 3], &[1.0; 2])
            .unwrap_err()
            .to_string();
        assert!(msg.contains('3') && msg.contains('2'));
    }

    #[test]
    fn tape_matches_plain() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![3.0, 4.0], vec![1.5, 1.0]]).unwrap();
        for mode in Aggregation::ALL {
            let mut tape = Tape::new();
            let (sv, pv) = (tape.constant(s.clone()), tape.constant(p.clone()));
            let r = aggregate(&mut tape, *mode, sv, pv).unwrap();
            for i in 0..2 {
                let expected = match mode {
                    Aggregation::Concat => aggregate_concat(s.row_slice(i), p.row_slice(i)),
                    Aggregation::Average => {
                        aggregate_average(s.row_slice(i), p.row_slice(i)).unwrap()
                    }
                };
                assert_eq!(tape.value(r).row_slice(i), expected.as_slice());
            }
        }
    }
}
