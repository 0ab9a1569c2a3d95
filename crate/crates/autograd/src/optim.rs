use std::collections::BTreeMap;

use crate::graph::Gradients;
use crate::nn::{child, Module};
use crate::tensor::Tensor;

/// Adaptive-moment gradient descent over one or more named modules.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, groups: &[(&str, &dyn Module)], grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (prefix, module) in groups {
            module.for_each_param(prefix, &mut |name, p| {
                if !p.trainable() {
                    return;
                }
                let Some(g) = grads.get(&p.var()) else { return };
                let shape = g.shape().to_vec();
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
                let mut value = p.value();
                let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = b1 * md[i] + (1.0 - b1) * gi;
                    vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
                p.set(value);
            });
        }
    }

    /// Serializable state: `step` plus first/second moments per parameter.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            child(prefix, "step"),
            Tensor::new(&[1], vec![self.step as f32]),
        )];
        for (name, (m, v)) in &self.moments {
            out.push((child(prefix, &format!("m.{name}")), m.clone()));
            out.push((child(prefix, &format!("v.{name}")), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        let head = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}.")
        };
        self.moments.clear();
        self.step = 0;
        for (key, t) in tensors {
            let Some(rest) = key.strip_prefix(&head) else {
                continue;
            };
            if rest == "step" {
                self.step = t.item() as u64;
            } else if let Some(name) = rest.strip_prefix("m.") {
                self.moments
                    .entry(name.to_string())
                    .or_insert_with(|| (t.clone(), t.clone()))
                    .0 = t.clone();
            } else if let Some(name) = rest.strip_prefix("v.") {
                self.moments
                    .entry(name.to_string())
                    .or_insert_with(|| (t.clone(), t.clone()))
                    .1 = t.clone();
            }
        }
    }
}
