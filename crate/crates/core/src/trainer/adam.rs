use crate::model::{GroupSet, Weights};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments, allocated only for trainable parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    /// `(m, v)` per parameter, `None` when the parameter is frozen.
    pub moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl OptimizerState {
    pub fn new(w: &Weights<f32>, trainable: &GroupSet, lr: f64) -> Self {
        let moments = w
            .params
            .iter()
            .map(|p| {
                trainable
                    .contains(&p.group)
                    .then(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
            })
            .collect();
        Self { step: 0, lr, moments }
    }

    /// One bias-corrected update; `grads` is parallel to `w.params`.
    pub fn apply(&mut self, w: &mut Weights<f32>, grads: &[Option<Vec<f32>>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for ((p, mom), g) in w.params.iter_mut().zip(&mut self.moments).zip(grads) {
            let (Some((m, v)), Some(g)) = (mom.as_mut(), g.as_ref()) else { continue };
            for (((x, m), v), &g) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m as f64 / c1;
                let vh = *v as f64 / c2;
                *x -= (self.lr * mh / (vh.sqrt() + EPSILON)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{all_groups, ModelConfig};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Weights::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
        let before = w.clone();
        let mut opt = OptimizerState::new(&w, &all_groups(), 1e-3);
        let grads: Vec<Option<Vec<f32>>> = w
            .params
            .iter()
            .map(|p| Some(vec![0.5; p.value.len()]))
            .collect();
        opt.apply(&mut w, &grads);
        for (a, b) in w.params.iter().zip(&before.params) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!(((y - x) - 1e-3).abs() < 1e-6);
            }
        }
    }
}
