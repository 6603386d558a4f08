use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `step` is only used in error messages.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], step: usize) -> Result<()> {
        for (id, p) in params.iter() {
            let g = &grads[id.index()];
            if g.len() != p.value.len() {
                return Err(Error::shape("adam", p.value.shape(), &[g.len()]));
            }
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Aborted {
                    step,
                    reason: format!("non-finite gradient in parameter {} at element {k}", p.name),
                });
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let x = params.value_mut(id).data_mut();
            for k in 0..x.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                x[k] -= lr * mh / (vh.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn export(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (id, p) in params.iter() {
            let shape = p.value.shape().to_vec();
            let i = id.index();
            out.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), self.m[i].clone()).unwrap()));
            out.push((format!("adam.v.{}", p.name), Tensor::new(shape, self.v[i].clone()).unwrap()));
        }
        out
    }

    pub fn import(config: AdamConfig, t: u64, params: &ParamStore, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut adam = Self::new(config, params);
        adam.t = t;
        let lookup = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks optimizer state {name}")))
        };
        for (id, p) in params.iter() {
            let i = id.index();
            for (which, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = lookup(&format!("adam.{which}.{}", p.name))?;
                if t.len() != dst.len() {
                    return Err(Error::shape("optimizer state", p.value.shape(), t.shape()));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use rand::SeedableRng;

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let id = s.add("x".into(), &[1], Init::Zeros, &mut rng);
        s.value_mut(id).data_mut()[0] = x;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.m[0][0] = 0.0;
        adam.step(&mut s, &[vec![0.0]], 0).unwrap();
        assert_eq!(s.get(s.find("x").unwrap()).value.data(), &[1.5]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut s = store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[vec![2.0]], 0).unwrap();
        let (m0, v0) = (adam.m[0][0], adam.v[0][0]);
        adam.step(&mut s, &[vec![0.0]], 1).unwrap();
        assert_eq!(adam.m[0][0], 0.9 * m0);
        assert_eq!(adam.v[0][0], 0.999 * v0);
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut s = store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &s);
        let id = s.find("x").unwrap();
        for step in 0..200 {
            let x = s.get(id).value.data()[0];
            adam.step(&mut s, &[vec![2.0 * x]], step).unwrap();
        }
        assert!(s.get(id).value.data()[0].abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        match adam.step(&mut s, &[vec![f64::NAN]], 17) {
            Err(Error::Aborted { step: 17, reason }) => assert!(reason.contains('x')),
            other => panic!("unexpected {other:?}"),
        }
    }
}
