//! Affine-free batch standardisation with running statistics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid_arg, invalid_state, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub trained: bool,
}

impl RescaleState {
    pub fn new(width: usize, momentum: f64, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        Self {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum,
            epsilon,
            trained: false,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Records the rescaling of `x` on `tape`.
    ///
    /// Train mode standardises with the batch mean and biased variance and
    /// returns those moments so the caller can [`commit`](Self::commit)
    /// them. Eval mode uses the running statistics only.
    pub fn apply(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(Var, Option<Moments>)> {
        let input = tape.value(x);
        let (rows, cols) = input.shape();
        if cols != self.width() {
            return Err(invalid_arg(format!(
                "rescale width {} but input has {cols} columns",
                self.width()
            )));
        }
        match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(invalid_state(
                        "batch rescaling in train mode needs at least two rows",
                    ));
                }
                let (mean, var) = column_moments(input);
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + self.epsilon).sqrt())
                    .collect();
                let y = tape.standardize(x, &mean, inv_std, true);
                Ok((y, Some(Moments { mean, var, rows })))
            }
            Mode::Eval => {
                if !self.trained {
                    return Err(invalid_state(
                        "eval-mode rescaling before any training update",
                    ));
                }
                let inv_std = self
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + self.epsilon).sqrt())
                    .collect();
                Ok((
                    tape.standardize(x, &self.running_mean, inv_std, false),
                    None,
                ))
            }
        }
    }

    /// Folds batch moments into the running statistics. The variance update
    /// uses the unbiased estimate.
    pub fn commit(&mut self, moments: &Moments) {
        let unbias = moments.rows as f64 / (moments.rows as f64 - 1.0);
        for c in 0..self.width() {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * moments.mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                + self.momentum * moments.var[c] * unbias;
        }
        self.trained = true;
    }

    /// Eval-mode rescaling without a tape. Never mutates `self`.
    pub fn apply_eval(&self, x: &Matrix) -> Result<Matrix> {
        if !self.trained {
            return Err(invalid_state(
                "eval-mode rescaling before any training update",
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.running_mean[c]) / (self.running_var[c] + self.epsilon).sqrt();
            }
        }
        Ok(out)
    }
}

/// Column means and biased variances.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]) * (v - mean[c]);
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Standalone form of the rescaling operation.
pub fn batch_rescale(pre: &Matrix, state: &mut RescaleState, mode: Mode) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(pre.clone());
    let (y, moments) = state.apply(&mut tape, x, mode)?;
    if let Some(m) = moments {
        state.commit(&m);
    }
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(width: usize) -> RescaleState {
        RescaleState::new(width, 0.1, 1e-12)
    }

    #[test]
    fn constant_column_goes_to_zero() {
        let x = Matrix::from_rows(&[vec![3.0], vec![3.0], vec![3.0]]);
        let y = batch_rescale(&x, &mut state(1), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_column() {
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        let y = batch_rescale(&x, &mut state(1), Mode::Train).unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permuting_rows_permutes_output() {
        let x = Matrix::from_rows(&[vec![0.1, 4.0], vec![2.0, -1.0], vec![0.7, 0.3]]);
        let p = x.select_rows(&[2, 0, 1]);
        let y = batch_rescale(&x, &mut state(2), Mode::Train).unwrap();
        let yp = batch_rescale(&p, &mut state(2), Mode::Train).unwrap();
        assert_eq!(y.select_rows(&[2, 0, 1]), yp);
    }

    #[test]
    fn error_paths() {
        let one = Matrix::from_rows(&[vec![1.0]]);
        assert!(batch_rescale(&one, &mut state(1), Mode::Train).is_err());
        assert!(batch_rescale(&one, &mut state(1), Mode::Eval).is_err());
        assert!(batch_rescale(&one, &mut state(2), Mode::Train).is_err());
    }

    #[test]
    fn eval_does_not_touch_statistics() {
        let mut s = state(1);
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        batch_rescale(&x, &mut s, Mode::Train).unwrap();
        assert!((s.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let before = s.clone();
        let single = Matrix::from_rows(&[vec![5.0]]);
        let y = batch_rescale(&single, &mut s, Mode::Eval).unwrap();
        assert_eq!(s, before);
        assert_eq!(y, s.apply_eval(&single).unwrap());
    }
}
