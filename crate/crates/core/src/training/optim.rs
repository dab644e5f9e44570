//! ADAM optimizer over the model's named parameters, honoring the freeze
//! policy: frozen groups receive no moment updates and no writes at all.

use std::collections::BTreeMap;

use crate::network::SegModel;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(beta1: f32) -> Adam {
        Adam {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update with the given learning rate. Only parameters in
    /// trainable groups move; everything else stays bit-identical.
    pub fn step(&mut self, model: &mut SegModel, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - (self.beta1 as f64).powf(t);
        let bias2 = 1.0 - (self.beta2 as f64).powf(t);
        let scale = (lr / bias1 * bias2.sqrt()) as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let policy = model.freeze_policy();
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |group, p| {
            if !policy.trainable(group) {
                return;
            }
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; p.data.len()], vec![0.0; p.data.len()]));
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                // scale folds both bias corrections into one multiplier:
                // lr * m_hat / (sqrt(v_hat) + eps') with eps applied on the
                // corrected denominator
                p.data[i] -= scale * m[i] / (v[i].sqrt() + eps * bias2.sqrt() as f32);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, FreezePolicy, ModelConfig};
    use crate::nn::Tensor;
    use crate::rng::Rng;

    fn tiny_model(seed: u64) -> crate::network::SegModel {
        build_model(&ModelConfig::small(32), seed).unwrap()
    }

    fn random_batch(seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::from_vec(1, 3, 32, 32, (0..3 * 1024).map(|_| rng.next_f64() as f32).collect())
            .unwrap()
    }

    fn snapshot(model: &mut crate::network::SegModel) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        model.visit_params_mut(&mut |_, p| out.push((p.name.clone(), p.data.clone())));
        out
    }

    fn run_one_step(model: &mut crate::network::SegModel, adam: &mut Adam) {
        let x = random_batch(5);
        model.zero_grads();
        let logits = model.forward_train(&x).unwrap();
        // arbitrary gradient pushing logits apart
        let gy = Tensor::from_vec(
            logits.n,
            logits.c,
            logits.h,
            logits.w,
            logits.data.iter().map(|&v| 0.01 * (v + 0.3)).collect(),
        )
        .unwrap();
        model.backward(&gy).unwrap();
        adam.step(model, 1e-3);
    }

    #[test]
    fn frozen_groups_are_bit_identical_after_steps() {
        let mut model = tiny_model(3);
        model.set_frozen(FreezePolicy::Frozen);
        let before = snapshot(&mut model);
        let mut adam = Adam::new(0.9);
        for _ in 0..3 {
            run_one_step(&mut model, &mut adam);
        }
        let after = snapshot(&mut model);
        let mut head_changed = false;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if crate::network::group_of(name) == "head" {
                head_changed |= a != b;
            } else {
                assert_eq!(a, b, "{name} moved while frozen");
            }
        }
        assert!(head_changed, "head should train in frozen mode");
    }

    #[test]
    fn unfrozen_step_moves_encoder() {
        let mut model = tiny_model(4);
        model.set_frozen(FreezePolicy::Unfrozen);
        let before = snapshot(&mut model);
        let mut adam = Adam::new(0.9);
        run_one_step(&mut model, &mut adam);
        let after = snapshot(&mut model);
        let changed = before
            .iter()
            .zip(&after)
            .any(|((name, a), (_, b))| name.starts_with("encoder") && a != b);
        assert!(changed, "at least one encoder parameter should move");
    }
}
