use crate::graph::Matrix;

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let values = p.data_mut().iter_mut();
            for (((x, &g), m), v) in values.zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]);
        let mut adam = Adam::new(0.1, &[&p]);
        adam.step(&mut [&mut p], &[Matrix::from_vec(1, 3, vec![2.0, -0.5, 0.0])]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn matches_scalar_reference() {
        // reference recursion written out for a single scalar
        let grads = [0.3, -1.2, 0.7, 0.0, 2.5];
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = Matrix::filled(1, 1, 0.5);
        let mut adam = Adam::new(0.01, &[&p]);
        for g in grads {
            adam.step(&mut [&mut p], &[Matrix::filled(1, 1, g)]);
        }
        assert_eq!(p.scalar(), x);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Matrix::from_vec(1, 2, vec![3.0, -2.0]);
        let mut adam = Adam::new(0.05, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            adam.step(&mut [&mut p], &[g]);
        }
        assert!(p.data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
