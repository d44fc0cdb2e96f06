//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Array2>,
    pub v: Vec<Array2>,
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Array2> = shapes.iter().map(|&(r, c)| Array2::zeros(r, c)).collect();
        Adam { lr, beta1, beta2, eps, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update of every parameter not marked frozen.
    pub fn step(&mut self, params: &mut [&mut Array2], grads: &[Array2], frozen: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut adam = Adam::new(&[(1, 3)], 0.1, 0.9, 0.999, 1e-8);
        let mut p = Array2::row_vector(&[1.0, 1.0, 1.0]);
        adam.step(&mut [&mut p], &[Array2::row_vector(&[2.0, -0.5, 0.0])], &[false]);
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] - 1.1).abs() < 1e-7 && d[2] == 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut adam = Adam::new(&[(1, 1)], 0.1, 0.9, 0.999, 1e-8);
        let mut p = Array2::row_vector(&[1.0]);
        adam.step(&mut [&mut p], &[Array2::row_vector(&[3.0])], &[true]);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(&[(1, 2)], 0.05, 0.9, 0.999, 1e-8);
        let mut p = Array2::row_vector(&[3.0, -2.0]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            adam.step(&mut [&mut p], &[g], &[false]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }
}
