use crate::model::{Group, ModelBundle};

/// `lr0 * gamma^floor(epoch / every)`.
pub fn lr_schedule(lr0: f64, epoch: usize, gamma: f64, every: usize) -> f64 {
    let every = every.max(1);
    lr0 * gamma.powi((epoch / every) as i32)
}

/// Adam with bias correction, keeping one step counter per parameter group.
///
/// State is indexed by the bundle's parameter registry, so one instance can
/// serve any subset of groups; [`Adam::step`] only touches the named group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: [u64; 3],
}

impl Adam {
    pub fn new(bundle: &ModelBundle, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = bundle
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            steps: [0; 3],
        }
    }

    pub fn steps(&self, group: Group) -> u64 {
        self.steps[group.tag() as usize]
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// Applies one update to every parameter of `group` from its gradient slot.
    pub fn step(&mut self, bundle: &mut ModelBundle, group: Group, lr: f64) {
        let t = &mut self.steps[group.tag() as usize];
        *t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(*t as i32);
        let bc2 = 1.0 - b2.powi(*t as i32);
        for (i, p) in bundle.params_mut().iter_mut().enumerate() {
            if p.group != group {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ModelBundle {
        ModelBundle::new(
            ModelConfig {
                class_count: 2,
                point_widths: vec![4, 4],
                classifier_widths: vec![4],
                discriminator_hidden: 3,
            },
            1,
        )
        .unwrap()
    }

    /// Straight transcription of the published scalar Adam recurrence.
    fn scalar_adam(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powf(t));
            let v_hat = v / (1.0 - b2.powf(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        theta
    }

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        assert_eq!(lr_schedule(1e-3, 0, 0.5, 20), 1e-3);
        assert_eq!(lr_schedule(1e-3, 19, 0.5, 20), 1e-3);
        assert_eq!(lr_schedule(1e-3, 20, 0.5, 20), 5e-4);
        assert_eq!(lr_schedule(1e-3, 40, 0.5, 20), 2.5e-4);
        assert_eq!(lr_schedule(1e-3, 59, 0.5, 20), 2.5e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut b = model();
        let before = b.clone();
        let mut adam = Adam::new(&b, 0.9, 0.999, 1e-8);
        for g in Group::ALL {
            adam.step(&mut b, g, 1e-3);
        }
        assert_eq!(b, before);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut b = model();
        let idx = 0;
        let theta0 = b.params()[idx].value.data()[0];
        let grads = [1.0, 1.0, -0.5, 2.0, 0.0, 0.3];
        let mut adam = Adam::new(&b, 0.9, 0.999, 1e-8);
        for &g in &grads {
            b.params_mut()[idx].grad[0] = g;
            adam.step(&mut b, Group::Extractor, 1e-3);
        }
        let expected = scalar_adam(theta0, &grads, 1e-3, 0.9, 0.999, 1e-8);
        let got = b.params()[idx].value.data()[0];
        assert!((got - expected).abs() <= 1e-15, "{got} vs {expected}");
        assert_eq!(adam.steps(Group::Extractor), grads.len() as u64);

        // first step with g = 1 moves by lr / (1 + eps)
        let mut c = model();
        let before = c.params()[0].value.data()[0];
        c.params_mut()[0].grad[0] = 1.0;
        Adam::new(&c, 0.9, 0.999, 1e-8).step(&mut c, Group::Extractor, 1e-3);
        let moved = before - c.params()[0].value.data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn only_the_named_group_moves() {
        let mut b = model();
        for p in b.params_mut() {
            p.grad.fill(0.25);
        }
        let before = b.clone();
        let mut adam = Adam::new(&b, 0.9, 0.999, 1e-8);
        adam.step(&mut b, Group::Discriminator, 1e-2);
        let groups = [Group::Extractor, Group::Classifier];
        assert_eq!(b.fingerprint(&groups), before.fingerprint(&groups));
        assert_ne!(
            b.fingerprint(&[Group::Discriminator]),
            before.fingerprint(&[Group::Discriminator])
        );
    }
}
