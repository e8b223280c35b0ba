use super::params::ParamStore;

/// Stochastic gradient descent with classical momentum and L2 weight decay.
///
/// Weight decay applies to tensors whose name ends in `.weight`; normalization
/// gains, shifts and biases are not decayed.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, ps: &mut ParamStore<f32>, lr: f32) {
        if self.velocity.len() != ps.len() {
            self.velocity = ps.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        }
        for (p, vel) in ps.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let decay = if p.name.ends_with(".weight") { self.weight_decay } else { 0.0 };
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                let d = *g + decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

/// Step decay: multiply the base rate by 0.1 at each listed fraction of training.
pub fn step_decay_lr(base: f32, epoch: usize, epochs: usize, milestones: &[f64]) -> f32 {
    let progress = epoch as f64 / epochs.max(1) as f64;
    let drops = milestones.iter().filter(|&&m| progress >= m).count();
    base * 0.1f32.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn schedule_drops_at_half_and_three_quarters() {
        let lr = |e| step_decay_lr(1.0, e, 20, &[0.5, 0.75]);
        assert_eq!(lr(0), 1.0);
        assert_eq!(lr(9), 1.0);
        assert!((lr(10) - 0.1).abs() < 1e-7);
        assert!((lr(15) - 0.01).abs() < 1e-8);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("w.bias", Tensor::new(vec![1], vec![1.0]).unwrap(), true).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        ps.get_mut(id).grad[0] = 1.0;
        opt.step(&mut ps, 0.1);
        assert!((ps.get(id).value.data()[0] - 0.9).abs() < 1e-6);
        opt.step(&mut ps, 0.1);
        // v = 0.9·1 + 1 = 1.9
        assert!((ps.get(id).value.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("bn.running_var", Tensor::new(vec![1], vec![1.0]).unwrap(), false).unwrap();
        ps.get_mut(id).grad[0] = 5.0;
        Sgd::new(0.9, 1e-4).step(&mut ps, 1.0);
        assert_eq!(ps.get(id).value.data()[0], 1.0);
    }
}
