use super::TrainingConfig;
use crate::engine::{ParamStore, Tensor};

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Zero moments for every parameter of `store`.
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64 + weight_decay * *x as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *x = (*x as f64 - update) as f32;
            }
        }
    }
}

/// Learning rate for a 0-based epoch: the initial rate divided by the drop
/// factor once for every drop epoch that has been reached.
pub fn lr_at(epoch: usize, config: &TrainingConfig) -> f64 {
    let drops = config
        .lr_drop_epochs
        .iter()
        .filter(|&&d| epoch >= d)
        .count();
    config.initial_lr / config.lr_drop_factor.powi(drops as i32)
}

/// Trailing means over `window` values; entry `i` covers
/// `history[i..i + window]`.
pub fn moving_average(history: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || history.len() < window {
        return Vec::new();
    }
    history
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Whether the `window`-epoch moving average has gone `patience` epochs
/// without a new maximum.
pub fn early_stop(history: &[f64], window: usize, patience: usize) -> bool {
    let ma = moving_average(history, window);
    let Some(last) = ma.len().checked_sub(1) else {
        return false;
    };
    let mut best = 0;
    for (i, &v) in ma.iter().enumerate() {
        if v > ma[best] {
            best = i;
        }
    }
    last - best >= patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;

    fn scalar_store(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value));
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_a_fixed_point() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(Shape::new(1, 2, 1, 1, 3), 0.7));
        let mut adam = Adam::new(&s);
        for _ in 0..3 {
            adam.step(&mut s, 1e-2, 0.0);
        }
        assert!(s
            .iter()
            .next()
            .unwrap()
            .value
            .data()
            .iter()
            .all(|&v| v == 0.7));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-3, 0.0);
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().value.data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn two_steps_follow_the_recurrence() {
        // constant gradient 0.5: m = 0.05, 0.095; v = 2.5e-4, 4.9975e-4
        let mut s = scalar_store(0.0, 0.5);
        let mut adam = Adam::new(&s);
        let lr = 0.1;
        adam.step(&mut s, lr, 0.0);
        adam.step(&mut s, lr, 0.0);
        let (m2, v2) = (0.095f64, 4.9975e-4f64);
        let (mh, vh) = (m2 / (1.0 - 0.81), v2 / (1.0 - 0.998001));
        let step1 = lr * 0.5 / (0.5 + 1e-8);
        let step2 = lr * mh / (vh.sqrt() + 1e-8);
        let got = s.iter().next().unwrap().value.data()[0] as f64;
        assert!((got + step1 + step2).abs() < 1e-6, "{got}");
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut s = scalar_store(2.0, 0.0);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-2, 1e-5);
        assert!(s.iter().next().unwrap().value.data()[0] < 2.0);
    }

    #[test]
    fn schedule_table() {
        let c = TrainingConfig::default();
        for (epoch, lr) in [
            (0, 1e-4),
            (249, 1e-4),
            (250, 2e-5),
            (300, 2e-5),
            (400, 4e-6),
            (550, 8e-7),
            (600, 8e-7),
        ] {
            assert!((lr_at(epoch, &c) - lr).abs() < 1e-15, "epoch {epoch}");
        }
    }

    #[test]
    fn stopping_rule() {
        let rising: Vec<f64> = (0..200).map(|i| i as f64).collect();
        for n in 0..=200 {
            assert!(!early_stop(&rising[..n], 30, 60));
        }
        let flat = vec![0.5; 90];
        assert!(early_stop(&flat, 30, 60));
        assert!(!early_stop(&flat[..89], 30, 60));
        assert!(!early_stop(&flat[..29], 30, 60));
    }

    #[test]
    fn late_improvement_resets_patience() {
        let mut h = vec![0.5; 85];
        h.push(1.0);
        // the first window containing 1.0 sets the maximum; equal windows after it do not
        h.extend(vec![0.5; 59]);
        assert!(!early_stop(&h, 30, 60));
        h.push(0.5);
        assert!(early_stop(&h, 30, 60));
    }
}
