use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Scalar;

/// First and second moments, one vector per parameter group in parameter
/// order, and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like<P: Parameterized<T>>(params: &P) -> Self {
        let shapes: Vec<usize> = params.params().iter().map(|p| p.data.len()).collect();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let c = |v: &Vec<Vec<T>>| v.iter().map(|x| crate::tensor::cast_slice(x)).collect();
        AdamState {
            step: self.step,
            m: c(&self.m),
            v: c(&self.v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step<T: Scalar, P: Parameterized<T>>(
        &self,
        params: &mut P,
        grads: &P,
        state: &mut AdamState<T>,
    ) -> Result<()> {
        let gs = grads.params();
        let mut ps = params.params_mut();
        if ps.len() != gs.len() || ps.len() != state.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameter groups, {} gradients, {} moments",
                ps.len(),
                gs.len(),
                state.m.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in ps
            .iter_mut()
            .zip(&gs)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            if p.data.len() != g.data.len() || m.len() != g.data.len() {
                return Err(Error::shape(
                    "adam",
                    &[p.data.len(), m.len()],
                    &[g.data.len()],
                ));
            }
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{push, push_mut, ParamMut, ParamRef};

    #[derive(Clone, Debug, PartialEq)]
    struct Vector(Vec<f64>);

    impl Parameterized<f64> for Vector {
        fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, f64>>) {
            push(out, prefix, "w", &[self.0.len()], &self.0);
        }
        fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, f64>>) {
            let n = self.0.len();
            push_mut(out, prefix, "w", &[n], &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Vector(vec![1.0, -2.0]);
        let mut s = AdamState::zeros_like(&p);
        Adam::new(0.1).step(&mut p, &Vector(vec![0.0, 0.0]), &mut s).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![vec![0.0, 0.0]]);
        assert_eq!(s.v, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = Vector(vec![0.0, 0.0, 0.0]);
        let mut s = AdamState::zeros_like(&p);
        Adam::new(1e-3)
            .step(&mut p, &Vector(vec![0.5, -3.0, 1e-2]), &mut s)
            .unwrap();
        assert!((p.0[0] + 1e-3).abs() < 1e-9);
        assert!((p.0[1] - 1e-3).abs() < 1e-9);
        assert!((p.0[2] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // Independent scalar simulation of the same recurrence.
        let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
        let mut p = Vector(vec![0.0]);
        let mut s = AdamState::zeros_like(&p);
        let opt = Adam::new(0.1);
        let mut last = f64::MAX;
        for t in 1..=100 {
            let g = p.0[0] - 3.0;
            opt.step(&mut p, &Vector(vec![g]), &mut s).unwrap();
            let gw = w - 3.0;
            m = 0.9 * m + 0.1 * gw;
            v = 0.999 * v + 0.001 * gw * gw;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w - p.0[0]).abs() < 1e-12);
            if t <= 20 {
                let loss = 0.5 * (p.0[0] - 3.0).powi(2);
                assert!(loss < last);
                last = loss;
            }
        }
        assert!((p.0[0] - 3.0).abs() < 0.5);
    }
}
