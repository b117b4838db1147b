use crate::model::ParamSet;
use crate::scalar::Scalar;

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v − η·g`, `θ ← θ + v`. With `μ = 0` this is plain SGD.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update of `params` from the matching gradient set.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grad: &P) {
        let grads = grad.named();
        let mut slots = params.slices_mut();
        if self.velocity.is_empty() {
            self.velocity = slots.iter().map(|s| vec![T::zero(); s.len()]).collect();
        }
        assert_eq!(
            slots.len(),
            self.velocity.len(),
            "optimizer bound to a different parameter set"
        );
        for ((theta, (_, _, g)), v) in slots.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
                *t += *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DrmArch, DrmParams};

    #[test]
    fn zero_momentum_is_vanilla_descent() {
        let mut p = DrmParams::<f64>::init(DrmArch::TINY, 4);
        let mut g = p.zeros_like();
        for (i, s) in g.slices_mut().into_iter().enumerate() {
            for (j, v) in s.iter_mut().enumerate() {
                *v = ((i * 31 + j) as f64 * 0.7).sin();
            }
        }
        let before = p.flatten();
        let mut opt = MomentumSgd::new(0.05, 0.0);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        for ((a, b), gi) in p.flatten().iter().zip(&before).zip(g.flatten()) {
            assert!((a - (b - 2.0 * 0.05 * gi)).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = DrmParams::<f64>::zeros(DrmArch::TINY);
        let mut g = p.zeros_like();
        g.decoder.convs[3].bias[0] = 1.0;
        let mut opt = MomentumSgd::new(0.1, 0.9);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        // v1 = -0.1, v2 = -0.09 - 0.1 = -0.19 ⇒ θ = -0.29
        assert!((p.decoder.convs[3].bias[0] + 0.29).abs() < 1e-14);
    }
}
