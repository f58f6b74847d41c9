use crate::nn::Param;
use crate::tensor::snap_to_f32;

/// Adam with bias correction. Moment buffers are keyed by the order in which
/// parameters are passed to [`Adam::step`], so callers must always visit
/// parameters in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Updated values are rounded to `f32`, the storage precision.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.learning_rate * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for (slot, param) in params.into_iter().enumerate() {
            if slot == self.first.len() {
                self.first.push(vec![0.0; param.value.len()]);
                self.second.push(vec![0.0; param.value.len()]);
            }
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let values = param.value.data_mut();
            for (i, &g) in param.grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                values[i] -= lr * m[i] / (v[i].sqrt() + self.epsilon);
            }
            snap_to_f32(values);
            param.zero_grad();
        }
    }
}
