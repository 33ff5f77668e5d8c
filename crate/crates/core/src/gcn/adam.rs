use ndarray::{Array1, Array2, Zip};

use super::{GcnModel, Gradients};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

fn zeros_like(model: &GcnModel) -> Gradients {
    Gradients {
        weights: model
            .weights
            .iter()
            .map(|w| Array2::zeros(w.dim()))
            .collect(),
        layer_biases: model
            .layer_biases
            .as_ref()
            .map(|b| b.iter().map(|v| Array1::zeros(v.len())).collect()),
        head_weight: Array2::zeros(model.head_weight.dim()),
        head_bias: Array1::zeros(model.head_bias.len()),
    }
}

impl Adam {
    pub fn new(model: &GcnModel, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros_like(model),
            v: zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut GcnModel, grads: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let eps = self.eps;
        let update = |param: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for k in 0..model.weights.len() {
            Zip::from(&mut model.weights[k])
                .and(&grads.weights[k])
                .and(&mut self.m.weights[k])
                .and(&mut self.v.weights[k])
                .for_each(update);
        }
        if let (Some(b), Some(g), Some(m), Some(v)) = (
            model.layer_biases.as_mut(),
            grads.layer_biases.as_ref(),
            self.m.layer_biases.as_mut(),
            self.v.layer_biases.as_mut(),
        ) {
            for k in 0..b.len() {
                Zip::from(&mut b[k])
                    .and(&g[k])
                    .and(&mut m[k])
                    .and(&mut v[k])
                    .for_each(update);
            }
        }
        Zip::from(&mut model.head_weight)
            .and(&grads.head_weight)
            .and(&mut self.m.head_weight)
            .and(&mut self.v.head_weight)
            .for_each(update);
        Zip::from(&mut model.head_bias)
            .and(&grads.head_bias)
            .and(&mut self.m.head_bias)
            .and(&mut self.v.head_bias)
            .for_each(update);
    }
}
